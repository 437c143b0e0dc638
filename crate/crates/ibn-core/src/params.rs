//! Named parameter storage and its binding onto a tape.
//!
//! Parameters live in a [`ParamStore`] keyed by insertion order and carry
//! stable string names (the checkpoint format sorts nothing; manifest
//! order is insertion order). Initialization derives each parameter's
//! stream from a hash of its name, so adding or reordering parameters
//! never shifts another parameter's initial values.

use crate::autodiff::{Tape, VarId};
use crate::error::{IbnError, Result};
use crate::rng::{name_hash, stream, Purpose};
use crate::tensor::Tensor;
use rand::Rng;
use std::collections::HashMap;

/// Index into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    by_name: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Register a parameter initialized with Glorot-uniform values drawn
    /// from a stream keyed by (seed, hash(name)). fan_in/fan_out follow the
    /// matrix convention; vectors (biases) initialize to zero.
    pub fn register(&mut self, name: &str, shape: &[usize], seed: u64) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(IbnError::invalid(format!("duplicate parameter name {name}")));
        }
        let value = if shape.len() == 2 {
            let (fan_in, fan_out) = (shape[0], shape[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut rng = stream(seed, Purpose::Init, &[name_hash(name)]);
            let n = fan_in * fan_out;
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
            Tensor::new(shape.to_vec(), data)?
        } else if shape.len() == 3 {
            // Stacked matrices (decoder kernels): fan uses the trailing two dims.
            let (fan_in, fan_out) = (shape[1] * shape[2], shape[2]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut rng = stream(seed, Purpose::Init, &[name_hash(name)]);
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
            Tensor::new(shape.to_vec(), data)?
        } else {
            Tensor::zeros(shape)
        };
        Ok(self.push(name, value))
    }

    /// Register with an explicit initial value (checkpoint load, tests).
    pub fn push(&mut self, name: &str, value: Tensor) -> ParamId {
        let idx = self.entries.len();
        self.by_name.insert(name.to_string(), idx);
        self.entries.push((name.to_string(), value));
        ParamId(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    /// Insertion-order iteration; this order is the checkpoint order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Overwrite a parameter's value in place; shape must match.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let current = &self.entries[id.0].1;
        if current.shape() != value.shape() {
            return Err(IbnError::ShapeMismatch {
                op: "set_value",
                lhs: current.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.entries[id.0].1 = value;
        Ok(())
    }
}

/// Per-forward-pass binding of parameters into a tape. Each parameter is
/// bound at most once per tape, so reuse across time steps lands on the
/// same tape node and gradients accumulate there automatically.
pub struct Binder {
    bound: HashMap<ParamId, VarId>,
}

impl Default for Binder {
    fn default() -> Self {
        Self::new()
    }
}

impl Binder {
    pub fn new() -> Self {
        Binder {
            bound: HashMap::new(),
        }
    }

    pub fn get(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> VarId {
        *self
            .bound
            .entry(id)
            .or_insert_with(|| tape.leaf(store.value(id).clone()))
    }

    /// Collect gradients for every bound parameter after a backward pass.
    /// Parameters never bound on this tape are absent from the result.
    pub fn bound_vars(&self) -> Vec<(ParamId, VarId)> {
        let mut v: Vec<_> = self.bound.iter().map(|(&p, &n)| (p, n)).collect();
        v.sort_by_key(|(p, _)| p.0);
        v
    }
}

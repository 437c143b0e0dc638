//! Reverse-mode automatic differentiation over dense f64 arrays.
//!
//! A [`Tape`] records operations in topological order during the forward
//! pass; [`Tape::backward`] replays them in reverse, accumulating exact
//! chain-rule gradients. The operator set is exactly what the model needs:
//! no broadcasting beyond matrix+row bias, no fusion, no mixed precision.
//!
//! Reset rule: each call to `backward` works on transient accumulators and
//! then writes gradients into the *requested leaf* nodes only; interior
//! node grad buffers are never touched. Recording may continue after a
//! backward pass; `reset` drops all nodes.

use crate::error::{IbnError, Result};
use crate::tensor::{matmul_into, Tensor};
use std::collections::HashMap;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NodeKind {
    /// Differentiable input (parameter or data we may want gradients for).
    Leaf,
    /// Non-differentiable input; backward never flows into it.
    Constant,
    Interior,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Matmul { a: VarId, b: VarId },
    Transpose { x: VarId },
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    Div { a: VarId, b: VarId },
    AddBias { x: VarId, bias: VarId },
    Affine { x: VarId, scale: f64 },
    Exp { x: VarId },
    Sqrt { x: VarId },
    Abs { x: VarId },
    Relu { x: VarId },
    Gelu { x: VarId },
    Elu { x: VarId },
    Softmax { x: VarId },
    LayerNorm { x: VarId, inv_std: Vec<f64> },
    Concat { inputs: Vec<VarId> },
    Slice { x: VarId, axis: usize, start: usize, len: usize },
    Reshape { x: VarId },
    Sum { x: VarId },
    Mean { x: VarId },
    DropoutApply { x: VarId, mask: Tensor, scale: f64 },
    PairwiseSqDist { x: VarId },
    SelectRows { mask: Vec<bool>, a: VarId, b: VarId },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    kind: NodeKind,
}

/// Recording tape. Single-threaded per model instance.
pub struct Tape {
    nodes: Vec<Node>,
}

pub type GradMap = HashMap<VarId, Tensor>;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> IbnError {
    IbnError::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all recorded nodes.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, kind: NodeKind) -> VarId {
        let id = VarId(self.nodes.len());
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            kind,
        });
        id
    }

    /// Differentiable input node.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Input, NodeKind::Leaf)
    }

    /// Non-differentiable input node; gradients stop here.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Input, NodeKind::Constant)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient written by the last backward pass, if `id` was a requested leaf.
    pub fn grad(&self, id: VarId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn wants_grad(&self, id: VarId) -> bool {
        self.nodes[id.0].kind != NodeKind::Constant
    }

    // ---- primitives ----------------------------------------------------

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::Matmul { a, b }, NodeKind::Interior))
    }

    pub fn transpose(&mut self, x: VarId) -> Result<VarId> {
        let value = self.value(x).transpose2()?;
        Ok(self.push(value, Op::Transpose { x }, NodeKind::Interior))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| x + y)
            .map_err(|_| shape_err("add", self.value(a), self.value(b)))?;
        Ok(self.push(value, Op::Add { a, b }, NodeKind::Interior))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| x - y)
            .map_err(|_| shape_err("sub", self.value(a), self.value(b)))?;
        Ok(self.push(value, Op::Sub { a, b }, NodeKind::Interior))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .map_err(|_| shape_err("mul", self.value(a), self.value(b)))?;
        Ok(self.push(value, Op::Mul { a, b }, NodeKind::Interior))
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| x / y)
            .map_err(|_| shape_err("div", self.value(a), self.value(b)))?;
        Ok(self.push(value, Op::Div { a, b }, NodeKind::Interior))
    }

    /// Matrix plus row vector: [r, c] + [c].
    pub fn add_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(bias).shape() != [c] {
            return Err(shape_err("add_bias", self.value(x), self.value(bias)));
        }
        let xv = self.value(x).data();
        let bv = self.value(bias).data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(xv[i * c + j] + bv[j]);
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(value, Op::AddBias { x, bias }, NodeKind::Interior))
    }

    /// Elementwise scale*x + shift.
    pub fn affine(&mut self, x: VarId, scale: f64, shift: f64) -> VarId {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, Op::Affine { x, scale }, NodeKind::Interior)
    }

    pub fn exp(&mut self, x: VarId) -> VarId {
        let value = self.value(x).map(f64::exp);
        self.push(value, Op::Exp { x }, NodeKind::Interior)
    }

    /// Elementwise square root with subgradient 0 at 0, so sample standard
    /// deviations with zero spread do not poison gradients.
    pub fn sqrt(&mut self, x: VarId) -> VarId {
        let value = self.value(x).map(f64::sqrt);
        self.push(value, Op::Sqrt { x }, NodeKind::Interior)
    }

    /// Elementwise |x| with subgradient 0 at 0.
    pub fn abs(&mut self, x: VarId) -> VarId {
        let value = self.value(x).map(f64::abs);
        self.push(value, Op::Abs { x }, NodeKind::Interior)
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu { x }, NodeKind::Interior)
    }

    /// Exact GeLU, x * Phi(x) with the Gaussian CDF (erf form).
    pub fn gelu(&mut self, x: VarId) -> VarId {
        let value = self.value(x).map(gelu_scalar);
        self.push(value, Op::Gelu { x }, NodeKind::Interior)
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, x: VarId) -> VarId {
        let value = self
            .value(x)
            .map(|v| if v > 0.0 { v } else { v.exp() - 1.0 });
        self.push(value, Op::Elu { x }, NodeKind::Interior)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: VarId) -> VarId {
        let value = softmax_last_axis(self.value(x));
        self.push(value, Op::Softmax { x }, NodeKind::Interior)
    }

    /// Layer normalization over the last axis, eps = 1e-5, no learnable affine.
    pub fn layer_norm(&mut self, x: VarId) -> VarId {
        const EPS: f64 = 1e-5;
        let t = self.value(x);
        let width = *t.shape().last().expect("layer_norm on rank-0");
        let rows = t.numel() / width;
        let mut out = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; rows];
        for i in 0..rows {
            let row = &t.data()[i * width..(i + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[i] = is;
            for j in 0..width {
                out[i * width + j] = (row[j] - mean) * is;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("layer_norm shape");
        self.push(value, Op::LayerNorm { x, inv_std }, NodeKind::Interior)
    }

    /// Concatenate along the last axis.
    pub fn concat(&mut self, inputs: &[VarId]) -> Result<VarId> {
        if inputs.is_empty() {
            return Err(IbnError::invalid("concat of zero tensors"));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        let rank = first.len();
        let mut widths = Vec::with_capacity(inputs.len());
        let mut total_width = 0;
        for &id in inputs {
            let s = self.value(id).shape();
            if s.len() != rank || s[..rank - 1] != first[..rank - 1] {
                return Err(shape_err("concat", self.value(inputs[0]), self.value(id)));
            }
            widths.push(s[rank - 1]);
            total_width += s[rank - 1];
        }
        let outer: usize = first[..rank - 1].iter().product();
        let mut out = Vec::with_capacity(outer * total_width);
        for i in 0..outer {
            for (&id, &w) in inputs.iter().zip(widths.iter()) {
                let d = self.value(id).data();
                out.extend_from_slice(&d[i * w..(i + 1) * w]);
            }
        }
        let mut shape = first;
        shape[rank - 1] = total_width;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            NodeKind::Interior,
        ))
    }

    /// Slice `len` indices starting at `start` along `axis`.
    pub fn slice(&mut self, x: VarId, axis: usize, start: usize, len: usize) -> Result<VarId> {
        let t = self.value(x);
        let shape = t.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(IbnError::invalid(format!(
                "slice axis {axis} range {start}..{} out of bounds for shape {:?}",
                start + len,
                shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for a in start..start + len {
                let base = (o * axis_len + a) * inner;
                out.extend_from_slice(&t.data()[base..base + inner]);
            }
        }
        let mut new_shape = shape.to_vec();
        new_shape[axis] = len;
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(
            value,
            Op::Slice {
                x,
                axis,
                start,
                len,
            },
            NodeKind::Interior,
        ))
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> Result<VarId> {
        let t = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != t.numel() {
            return Err(IbnError::invalid(format!(
                "reshape {:?} -> {:?} changes element count",
                t.shape(),
                shape
            )));
        }
        let value = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        Ok(self.push(value, Op::Reshape { x }, NodeKind::Interior))
    }

    pub fn sum(&mut self, x: VarId) -> VarId {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, NodeKind::Interior)
    }

    pub fn mean(&mut self, x: VarId) -> VarId {
        let n = self.value(x).numel() as f64;
        let s = self.value(x).data().iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), Op::Mean { x }, NodeKind::Interior)
    }

    /// Apply an externally supplied binary keep-mask, scaling survivors by
    /// 1/(1-p). The mask is not a tape node; it never receives gradient.
    pub fn dropout_apply(&mut self, x: VarId, mask: &Tensor, p: f64) -> Result<VarId> {
        if !(0.0..1.0).contains(&p) {
            return Err(IbnError::invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        let t = self.value(x);
        if t.shape() != mask.shape() {
            return Err(shape_err("dropout_apply", t, mask));
        }
        let scale = 1.0 / (1.0 - p);
        let value = t.zip_map(mask, |v, m| v * m * scale)?;
        Ok(self.push(
            value,
            Op::DropoutApply {
                x,
                mask: mask.clone(),
                scale,
            },
            NodeKind::Interior,
        ))
    }

    /// Squared pairwise Euclidean distances of the rows of x: out[i][j] =
    /// ||x_i - x_j||^2. Kept squared so the Gaussian kernel composes without
    /// a sqrt at zero distance.
    pub fn pairwise_sq_dist(&mut self, x: VarId) -> Result<VarId> {
        let (n, d) = self.value(x).dims2()?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let mut s = 0.0;
                for k in 0..d {
                    let diff = xv[i * d + k] - xv[j * d + k];
                    s += diff * diff;
                }
                out[i * n + j] = s;
                out[j * n + i] = s;
            }
        }
        let value = Tensor::new(vec![n, n], out)?;
        Ok(self.push(value, Op::PairwiseSqDist { x }, NodeKind::Interior))
    }

    /// Per-row selection: row i of the output is row i of `a` where mask[i]
    /// is true, row i of `b` otherwise.
    pub fn select_rows(&mut self, mask: &[bool], a: VarId, b: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape() != tb.shape() {
            return Err(shape_err("select_rows", ta, tb));
        }
        if ta.shape().is_empty() || ta.shape()[0] != mask.len() {
            return Err(IbnError::invalid(format!(
                "select_rows mask length {} does not match leading dim of {:?}",
                mask.len(),
                ta.shape()
            )));
        }
        let rows = ta.shape()[0];
        let width = ta.numel() / rows;
        let mut out = Vec::with_capacity(ta.numel());
        for (i, &keep) in mask.iter().enumerate().take(rows) {
            let src = if keep { ta } else { tb };
            out.extend_from_slice(&src.data()[i * width..(i + 1) * width]);
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::SelectRows {
                mask: mask.to_vec(),
                a,
                b,
            },
            NodeKind::Interior,
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar root. Returns the gradient of the root
    /// with respect to each requested leaf; leaves unreachable from the root
    /// get a zero gradient. Interior nodes' grad buffers are untouched.
    pub fn backward(&mut self, root: VarId, leaves: &[VarId]) -> Result<GradMap> {
        if !self.value(root).is_scalar() {
            return Err(IbnError::NonScalarRoot);
        }
        let mut accum: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        accum[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = accum[i].take() else { continue };
            self.backward_op(i, &g, &mut accum);
            // Keep the gradient around in case this node is also a requested leaf.
            accum[i] = Some(g);
        }

        let mut map = GradMap::new();
        for &leaf in leaves {
            let g = accum[leaf.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.value(leaf).shape()));
            self.nodes[leaf.0].grad = Some(g.clone());
            map.insert(leaf, g);
        }
        Ok(map)
    }

    fn accumulate(&self, accum: &mut [Option<Tensor>], id: VarId, g: Tensor) {
        if !self.wants_grad(id) {
            return;
        }
        match &mut accum[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_op(&self, idx: usize, g: &Tensor, accum: &mut [Option<Tensor>]) {
        let op = self.nodes[idx].op.clone();
        let out_val = &self.nodes[idx].value;
        match op {
            Op::Input => {}

            Op::Matmul { a, b } => {
                let (m, k) = self.value(a).dims2().expect("recorded matmul lhs");
                let n = self.value(b).shape()[1];
                if self.wants_grad(a) {
                    // dA = g . B^T
                    let bt = self.value(b).transpose2().expect("matmul b transpose");
                    let mut da = vec![0.0; m * k];
                    matmul_into(g.data(), bt.data(), &mut da, m, n, k);
                    self.accumulate(accum, a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.wants_grad(b) {
                    // dB = A^T . g
                    let at = self.value(a).transpose2().expect("matmul a transpose");
                    let mut db = vec![0.0; k * n];
                    matmul_into(at.data(), g.data(), &mut db, k, m, n);
                    self.accumulate(accum, b, Tensor::new(vec![k, n], db).unwrap());
                }
            }

            Op::Transpose { x } => {
                self.accumulate(accum, x, g.transpose2().expect("transpose grad"));
            }

            Op::Add { a, b } => {
                self.accumulate(accum, a, g.clone());
                self.accumulate(accum, b, g.clone());
            }

            Op::Sub { a, b } => {
                self.accumulate(accum, a, g.clone());
                self.accumulate(accum, b, g.map(|v| -v));
            }

            Op::Mul { a, b } => {
                if self.wants_grad(a) {
                    self.accumulate(accum, a, g.zip_map(self.value(b), |gv, bv| gv * bv).unwrap());
                }
                if self.wants_grad(b) {
                    self.accumulate(accum, b, g.zip_map(self.value(a), |gv, av| gv * av).unwrap());
                }
            }

            Op::Div { a, b } => {
                let bv = self.value(b);
                if self.wants_grad(a) {
                    self.accumulate(accum, a, g.zip_map(bv, |gv, d| gv / d).unwrap());
                }
                if self.wants_grad(b) {
                    let av = self.value(a);
                    let mut db = g.zip_map(av, |gv, n| gv * n).unwrap();
                    let db2 = db.zip_map(bv, |v, d| -v / (d * d)).unwrap();
                    db = db2;
                    self.accumulate(accum, b, db);
                }
            }

            Op::AddBias { x, bias } => {
                self.accumulate(accum, x, g.clone());
                if self.wants_grad(bias) {
                    let (r, c) = g.dims2().expect("add_bias grad");
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += g.data()[i * c + j];
                        }
                    }
                    self.accumulate(accum, bias, Tensor::new(vec![c], db).unwrap());
                }
            }

            Op::Affine { x, scale } => {
                self.accumulate(accum, x, g.map(|v| v * scale));
            }

            Op::Exp { x } => {
                self.accumulate(accum, x, g.zip_map(out_val, |gv, y| gv * y).unwrap());
            }

            Op::Sqrt { x } => {
                let xv = self.value(x);
                let dx = g
                    .zip_map(xv, |gv, v| if v > 0.0 { gv * 0.5 / v.sqrt() } else { 0.0 })
                    .unwrap();
                self.accumulate(accum, x, dx);
            }

            Op::Abs { x } => {
                let xv = self.value(x);
                let dx = g
                    .zip_map(xv, |gv, v| {
                        if v > 0.0 {
                            gv
                        } else if v < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .unwrap();
                self.accumulate(accum, x, dx);
            }

            Op::Relu { x } => {
                let xv = self.value(x);
                let dx = g.zip_map(xv, |gv, v| if v > 0.0 { gv } else { 0.0 }).unwrap();
                self.accumulate(accum, x, dx);
            }

            Op::Gelu { x } => {
                let xv = self.value(x);
                let dx = g.zip_map(xv, |gv, v| gv * gelu_grad_scalar(v)).unwrap();
                self.accumulate(accum, x, dx);
            }

            Op::Elu { x } => {
                let xv = self.value(x);
                let dx = g
                    .zip_map(xv, |gv, v| if v > 0.0 { gv } else { gv * v.exp() })
                    .unwrap();
                self.accumulate(accum, x, dx);
            }

            Op::Softmax { x } => {
                // dx = y * (g - sum_j g_j y_j) per row
                let y = out_val;
                let width = *y.shape().last().unwrap();
                let rows = y.numel() / width;
                let mut dx = vec![0.0; y.numel()];
                for i in 0..rows {
                    let yr = &y.data()[i * width..(i + 1) * width];
                    let gr = &g.data()[i * width..(i + 1) * width];
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..width {
                        dx[i * width + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(accum, x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }

            Op::LayerNorm { x, ref inv_std } => {
                // dx = inv_std * (g - mean(g) - y * mean(g * y)) per row
                let y = out_val;
                let width = *y.shape().last().unwrap();
                let rows = y.numel() / width;
                let mut dx = vec![0.0; y.numel()];
                for i in 0..rows {
                    let yr = &y.data()[i * width..(i + 1) * width];
                    let gr = &g.data()[i * width..(i + 1) * width];
                    let gmean = gr.iter().sum::<f64>() / width as f64;
                    let gymean =
                        gr.iter().zip(yr.iter()).map(|(&a, &b)| a * b).sum::<f64>() / width as f64;
                    for j in 0..width {
                        dx[i * width + j] = inv_std[i] * (gr[j] - gmean - yr[j] * gymean);
                    }
                }
                self.accumulate(accum, x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }

            Op::Concat { inputs } => {
                let rank = out_val.rank();
                let total_width = out_val.shape()[rank - 1];
                let outer = out_val.numel() / total_width;
                let mut offset = 0;
                for &id in &inputs {
                    let w = self.value(id).shape()[rank - 1];
                    if self.wants_grad(id) {
                        let mut dpart = Vec::with_capacity(outer * w);
                        for i in 0..outer {
                            let base = i * total_width + offset;
                            dpart.extend_from_slice(&g.data()[base..base + w]);
                        }
                        self.accumulate(
                            accum,
                            id,
                            Tensor::new(self.value(id).shape().to_vec(), dpart).unwrap(),
                        );
                    }
                    offset += w;
                }
            }

            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                let xs = self.value(x).shape().to_vec();
                let outer: usize = xs[..axis].iter().product();
                let axis_len = xs[axis];
                let inner: usize = xs[axis + 1..].iter().product();
                let mut dx = vec![0.0; self.value(x).numel()];
                for o in 0..outer {
                    for (ai, a) in (start..start + len).enumerate() {
                        let dst = (o * axis_len + a) * inner;
                        let src = (o * len + ai) * inner;
                        dx[dst..dst + inner].copy_from_slice(&g.data()[src..src + inner]);
                    }
                }
                self.accumulate(accum, x, Tensor::new(xs, dx).unwrap());
            }

            Op::Reshape { x } => {
                let xs = self.value(x).shape().to_vec();
                self.accumulate(accum, x, Tensor::new(xs, g.data().to_vec()).unwrap());
            }

            Op::Sum { x } => {
                let gv = g.scalar_value();
                self.accumulate(accum, x, Tensor::full(self.value(x).shape(), gv));
            }

            Op::Mean { x } => {
                let n = self.value(x).numel() as f64;
                let gv = g.scalar_value() / n;
                self.accumulate(accum, x, Tensor::full(self.value(x).shape(), gv));
            }

            Op::DropoutApply { x, ref mask, scale } => {
                let dx = g.zip_map(mask, |gv, m| gv * m * scale).unwrap();
                self.accumulate(accum, x, dx);
            }

            Op::PairwiseSqDist { x } => {
                if !self.wants_grad(x) {
                    return;
                }
                let (n, d) = self.value(x).dims2().expect("pairwise grad");
                let xv = self.value(x).data();
                let gv = g.data();
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..n {
                        // out[i][j] depends on rows i and j
                        let gij = gv[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = xv[i * d + k] - xv[j * d + k];
                            dx[i * d + k] += 2.0 * gij * diff;
                            dx[j * d + k] -= 2.0 * gij * diff;
                        }
                    }
                }
                self.accumulate(accum, x, Tensor::new(vec![n, d], dx).unwrap());
            }

            Op::SelectRows { ref mask, a, b } => {
                let rows = mask.len();
                let width = out_val.numel() / rows;
                let mut da = vec![0.0; out_val.numel()];
                let mut db = vec![0.0; out_val.numel()];
                for (i, &keep) in mask.iter().enumerate() {
                    let seg = &g.data()[i * width..(i + 1) * width];
                    if keep {
                        da[i * width..(i + 1) * width].copy_from_slice(seg);
                    } else {
                        db[i * width..(i + 1) * width].copy_from_slice(seg);
                    }
                }
                self.accumulate(accum, a, Tensor::new(out_val.shape().to_vec(), da).unwrap());
                self.accumulate(accum, b, Tensor::new(out_val.shape().to_vec(), db).unwrap());
            }
        }
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    x * gauss_cdf(x)
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    gauss_cdf(x) + x * gauss_pdf(x)
}

fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn softmax_last_axis(t: &Tensor) -> Tensor {
    let width = *t.shape().last().expect("softmax on rank-0");
    let rows = t.numel() / width;
    let mut out = vec![0.0; t.numel()];
    for i in 0..rows {
        let row = &t.data()[i * width..(i + 1) * width];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..width {
            let e = (row[j] - max).exp();
            out[i * width + j] = e;
            denom += e;
        }
        for j in 0..width {
            out[i * width + j] /= denom;
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("softmax shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y, &[x]).unwrap();
        assert_eq!(grads[&x].data(), &[6.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        let err = tape.backward(x, &[x]).unwrap_err();
        assert_eq!(err.to_string(), "backward requires scalar root");
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let unused = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y, &[x, unused]).unwrap();
        assert_eq!(grads[&unused].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn using_a_var_twice_doubles_its_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5));
        let doubled = tape.add(x, x).unwrap();
        let s2 = tape.sum(doubled);
        let g2 = tape.backward(s2, &[x]).unwrap()[&x].scalar_value();

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5));
        let s1 = tape.sum(x);
        let g1 = tape.backward(s1, &[x]).unwrap()[&x].scalar_value();
        assert_eq!(g2, 2.0 * g1);
    }

    #[test]
    fn gelu_elu_zero_fixed_points() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let gl = tape.gelu(x);
        let el = tape.elu(x);
        assert_eq!(tape.value(gl).data(), &[0.0]);
        assert_eq!(tape.value(el).data(), &[0.0]);
    }

    #[test]
    fn gelu_gradient_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.gelu(x);
        let s = tape.sum(y);
        let grads = tape.backward(s, &[x]).unwrap();
        assert_eq!(grads[&x].data(), &[0.5]);
    }

    #[test]
    fn softmax_two_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![2.0, 1.0]).unwrap());
        let y = tape.softmax(x);
        let v = tape.value(y).data();
        assert!(close(v[0], 0.7311, 1e-4));
        assert!(close(v[1], 0.2689, 1e-4));
    }

    #[test]
    fn layer_norm_of_zeros_is_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 5]));
        let y = tape.layer_norm(x);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_with_ones_mask_and_p0_is_identity() {
        let mut tape = Tape::new();
        let t = Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let x = tape.leaf(t.clone());
        let mask = Tensor::full(&[2, 2], 1.0);
        let y = tape.dropout_apply(x, &mask, 0.0).unwrap();
        assert_eq!(tape.value(y), &t);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(x, c).unwrap();
        let grads = tape.backward(y, &[x]).unwrap();
        assert_eq!(grads[&x].data(), &[5.0]);
        assert!(tape.grad(c).is_none());
    }
}

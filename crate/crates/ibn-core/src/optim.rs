//! Adam with bias correction and global-norm gradient clipping.
//! Clipping happens before the moment updates, so the moments track the
//! clipped gradients.

use crate::error::{IbnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2-norm clip threshold; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(IbnError::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(IbnError::invalid("adam betas must lie in [0, 1)"));
        }
        if self.eps <= 0.0 {
            return Err(IbnError::invalid("adam epsilon must be positive"));
        }
        Ok(())
    }
}

/// First and second moments per parameter, in parameter-store order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> AdamState {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, _, value)| Tensor::zeros(value.shape()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Scale all gradients by min(1, clip / ||g||) where ||g|| is the global
/// L2 norm over every tensor. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], clip: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for &e in g.data() {
            sq += e * e;
        }
    }
    let norm = sq.sqrt();
    if clip > 0.0 && norm > clip {
        let scale = clip / norm;
        for g in grads.iter_mut() {
            g.scale_assign(scale);
        }
    }
    norm
}

/// One Adam update over the whole store. `grads` must be in store order
/// and shaped like the parameters. Returns the pre-clip gradient norm.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &mut [Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<f64> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(IbnError::invalid(format!(
            "adam state tracks {} tensors but store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for i in 0..store.len() {
        let value = store.value(ParamId(i));
        if grads[i].shape() != value.shape() {
            return Err(IbnError::ShapeMismatch {
                op: "adam gradient",
                lhs: grads[i].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
    }
    let norm = clip_global_norm(grads, cfg.clip_norm);
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for i in 0..grads.len() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = store.value_mut(ParamId(i)).data_mut();
        for k in 0..g.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(norm)
}

//! Training loop: MAE loss on the normalized scale, Adam with global
//! gradient clipping, seeded shuffling, early stopping on validation
//! MAE, and best-checkpoint restoration. Every stochastic choice is a
//! pure function of (seed, epoch, window index), so two runs with the
//! same seed produce bit-identical parameters and history.

use crate::data::{Dataset, Scaler, Window, WindowSet};
use crate::error::{IbnError, Result};
use crate::metrics::{metrics_over_windows, MetricReport};
use crate::model::ForecastModel;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::ParamId;
use crate::rng::{stream, DropoutStreams, Purpose};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 32,
            max_epochs: 200,
            patience: 15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(IbnError::invalid("batch size must be positive"));
        }
        if self.patience == 0 {
            return Err(IbnError::invalid("patience must be positive"));
        }
        Ok(())
    }
}

/// One history row. `seconds` is wall-clock and is excluded from the
/// determinism contract; compare histories with [`history_equivalent`].
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
    pub seconds: f64,
}

/// Bitwise equality on everything except wall-clock timing.
pub fn history_equivalent(a: &[EpochRecord], b: &[EpochRecord]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.epoch == y.epoch
                && x.train_mae.to_bits() == y.train_mae.to_bits()
                && x.val_mae.to_bits() == y.val_mae.to_bits()
        })
}

pub fn write_history_csv(path: &std::path::Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,train_mae,val_mae,seconds\n");
    for r in history {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.3}\n",
            r.epoch, r.train_mae, r.val_mae, r.seconds
        ));
    }
    std::fs::write(path, out).map_err(|e| IbnError::io(path.display().to_string(), e))
}

/// Forward one window and return the prediction values (N x L,
/// normalized scale).
pub fn predict_window(
    model: &ForecastModel,
    x: &Tensor,
    mask: &[bool],
    streams: &DropoutStreams,
) -> Result<Tensor> {
    let pass = model.forward(x, mask, streams)?;
    Ok(pass.tape.value(pass.y_hat).clone())
}

/// Forward + backward for one window. Returns the scalar loss and the
/// gradients in parameter-store order (zeros for parameters the pass
/// never touched).
fn window_loss_and_grads(
    model: &ForecastModel,
    w: &Window,
    mask: &[bool],
    streams: &DropoutStreams,
) -> Result<(f64, Vec<Tensor>)> {
    let mut pass = model.forward(&w.x, mask, streams)?;
    let y = pass.tape.constant(w.y.clone());
    let diff = pass.tape.sub(pass.y_hat, y)?;
    let abs = pass.tape.abs(diff);
    let loss = pass.tape.mean(abs);
    let loss_value = pass.tape.value(loss).scalar_value();
    let bound = pass.binder.bound_vars();
    let leaves: Vec<_> = bound.iter().map(|&(_, var)| var).collect();
    let grad_map = pass.tape.backward(loss, &leaves)?;
    let mut grads: Vec<Tensor> = (0..model.store.len())
        .map(|i| Tensor::zeros(model.store.value(ParamId(i)).shape()))
        .collect();
    for (pid, var) in bound {
        if let Some(g) = grad_map.get(&var) {
            grads[pid.0].add_assign(g);
        }
    }
    Ok((loss_value, grads))
}

/// Mean normalized MAE of a window set under fixed evaluation dropout.
pub fn split_mae(model: &ForecastModel, set: &WindowSet, mask: &[bool], seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for (i, w) in set.windows.iter().enumerate() {
        let streams = DropoutStreams::eval(seed, i as u64);
        let y_hat = predict_window(model, &w.x, mask, &streams)?;
        let mut acc = 0.0;
        for (a, b) in y_hat.data().iter().zip(w.y.data()) {
            acc += (a - b).abs();
        }
        total += acc / w.y.numel() as f64;
    }
    Ok(total / set.len() as f64)
}

fn first_non_finite_param(model: &ForecastModel) -> Option<String> {
    for (_, name, value) in model.store.iter() {
        if !value.all_finite() {
            return Some(name.to_string());
        }
    }
    None
}

/// Resumable training state. A checkpointed session continued later
/// produces bit-identical results to an uninterrupted run, because every
/// random draw is keyed by epoch and window index rather than by a
/// mutable generator.
pub struct TrainSession {
    pub adam: AdamState,
    /// 1-based epoch the next call will run.
    pub next_epoch: usize,
    /// Best validation MAE so far; None before the first epoch.
    pub best_val: Option<f64>,
    pub stale: usize,
    pub best_params: Option<Vec<Tensor>>,
    pub history: Vec<EpochRecord>,
    /// Set when patience ran out; further calls are no-ops.
    pub stopped: bool,
}

impl TrainSession {
    pub fn new(model: &ForecastModel) -> TrainSession {
        TrainSession {
            adam: AdamState::new(&model.store),
            next_epoch: 1,
            best_val: None,
            stale: 0,
            best_params: None,
            history: Vec::new(),
            stopped: false,
        }
    }
}

/// Run epochs until `cfg.max_epochs`, early stop, or `stop_after` total
/// epochs are in the history. Does not restore the best parameters; call
/// [`restore_best`] when training is finished.
pub fn train_session(
    model: &mut ForecastModel,
    data: &Dataset,
    cfg: &TrainConfig,
    session: &mut TrainSession,
    stop_after: Option<usize>,
) -> Result<()> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(IbnError::invalid(
            "training requires non-empty train and val splits",
        ));
    }
    while !session.stopped && session.next_epoch <= cfg.max_epochs {
        if let Some(limit) = stop_after {
            if session.history.len() >= limit {
                break;
            }
        }
        let epoch = session.next_epoch;
        let started = Instant::now();
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut rng = stream(cfg.seed, Purpose::Shuffle, &[epoch as u64]);
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut batch_grads: Option<Vec<Tensor>> = None;
            for &wi in batch {
                let streams = DropoutStreams::train(cfg.seed, epoch as u32, wi as u64);
                let (loss, grads) =
                    window_loss_and_grads(model, &data.train.windows[wi], &data.mask, &streams)?;
                if !loss.is_finite() {
                    let culprit = first_non_finite_param(model)
                        .map(|n| format!("parameter {n}"))
                        .unwrap_or_else(|| "model output".to_string());
                    return Err(IbnError::NonFinite(format!(
                        "loss became non-finite at epoch {epoch}, window {wi}; first non-finite value: {culprit}"
                    )));
                }
                epoch_loss += loss;
                match &mut batch_grads {
                    None => batch_grads = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.add_assign(g);
                        }
                    }
                }
            }
            let mut grads = batch_grads.expect("chunks are non-empty");
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.scale_assign(inv);
            }
            adam_step(&mut model.store, &mut grads, &mut session.adam, &cfg.adam)?;
            if let Some(name) = first_non_finite_param(model) {
                return Err(IbnError::NonFinite(format!(
                    "parameter {name} became non-finite at epoch {epoch}"
                )));
            }
        }
        let train_mae = epoch_loss / data.train.len() as f64;
        let val_mae = split_mae(model, &data.val, &data.mask, cfg.seed)?;
        session.history.push(EpochRecord {
            epoch,
            train_mae,
            val_mae,
            seconds: started.elapsed().as_secs_f64(),
        });
        session.next_epoch += 1;

        if session.best_val.map_or(true, |b| val_mae < b) {
            session.best_val = Some(val_mae);
            session.best_params = Some(
                (0..model.store.len())
                    .map(|i| model.store.value(ParamId(i)).clone())
                    .collect(),
            );
            session.stale = 0;
        } else {
            session.stale += 1;
            if session.stale >= cfg.patience {
                session.stopped = true;
            }
        }
    }
    Ok(())
}

/// Copy the best-validation parameters back into the model.
pub fn restore_best(model: &mut ForecastModel, session: &TrainSession) -> Result<()> {
    if let Some(best) = &session.best_params {
        for (i, value) in best.iter().enumerate() {
            model.store.set_value(ParamId(i), value.clone())?;
        }
    }
    Ok(())
}

/// Train in place. Returns the per-epoch history; on return the model
/// holds the parameters of the best validation epoch.
pub fn train(model: &mut ForecastModel, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochRecord>> {
    let mut session = TrainSession::new(model);
    train_session(model, data, cfg, &mut session, None)?;
    restore_best(model, &session)?;
    Ok(session.history)
}

/// Metrics over a split in original units, with evaluation-time MC
/// dropout under a fixed seed.
pub fn evaluate(
    model: &ForecastModel,
    set: &WindowSet,
    mask: &[bool],
    scaler: &Scaler,
    seed: u64,
) -> Result<MetricReport> {
    if set.is_empty() {
        return Err(IbnError::invalid("cannot evaluate an empty split"));
    }
    let mut pairs = Vec::with_capacity(set.len());
    for (i, w) in set.windows.iter().enumerate() {
        let streams = DropoutStreams::eval(seed, i as u64);
        let y_hat = predict_window(model, &w.x, mask, &streams)?;
        pairs.push((invert_scale(&w.y, scaler), invert_scale(&y_hat, scaler)));
    }
    metrics_over_windows(&pairs)
}

fn invert_scale(y: &Tensor, scaler: &Scaler) -> Tensor {
    let (n, l) = y.dims2().expect("targets are N x L");
    let mut out = y.clone();
    for v in 0..n {
        for j in 0..l {
            out.set2(v, j, scaler.invert(y.get2(v, j), v));
        }
    }
    out
}

/// Baseline that repeats each variable's last history value across the
/// horizon. Masked variables carry forward their zero fill, which is
/// the training mean in original units.
pub fn lvcf_baseline(set: &WindowSet, scaler: &Scaler) -> Result<MetricReport> {
    if set.is_empty() {
        return Err(IbnError::invalid("cannot evaluate an empty split"));
    }
    let mut pairs = Vec::with_capacity(set.len());
    for w in &set.windows {
        let n = w.x.shape()[0];
        let h = w.x.shape()[1];
        let c = w.x.shape()[2];
        let l = w.y.shape()[1];
        let mut y_hat = Tensor::zeros(&[n, l]);
        for v in 0..n {
            let last = w.x.data()[v * h * c + (h - 1) * c];
            for j in 0..l {
                y_hat.set2(v, j, last);
            }
        }
        pairs.push((invert_scale(&w.y, scaler), invert_scale(&y_hat, scaler)));
    }
    metrics_over_windows(&pairs)
}

/// Baseline that predicts every variable's training mean (normalized
/// zero) everywhere.
pub fn train_mean_baseline(set: &WindowSet, scaler: &Scaler) -> Result<MetricReport> {
    if set.is_empty() {
        return Err(IbnError::invalid("cannot evaluate an empty split"));
    }
    let mut pairs = Vec::with_capacity(set.len());
    for w in &set.windows {
        let y_hat = Tensor::zeros(w.y.shape());
        pairs.push((invert_scale(&w.y, scaler), invert_scale(&y_hat, scaler)));
    }
    metrics_over_windows(&pairs)
}

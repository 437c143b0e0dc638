//! Interpretability exports: does the model's estimated input
//! uncertainty track its actual reconstruction error, and what do the
//! two spatial graphs look like.
//!
//! Reconstruction error is measured in the reconstructor's own output
//! space on the normalized scale: a stochastic pass on the masked input
//! is compared against a deterministic no-dropout pass on the unmasked
//! input, row by row, averaged over time steps, directions, and
//! features. Sigma comes from the same stochastic pass.

use crate::data::WindowSet;
use crate::error::{IbnError, Result};
use crate::model::{ForecastModel, ForwardTrace};
use crate::rng::DropoutStreams;
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct DiagnosticRow {
    pub variable: usize,
    pub window: usize,
    pub reconstruction_error: f64,
    pub sigma: f64,
}

/// 1-based ranks with ties sharing their average rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("ranks need finite inputs"));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; None when fewer than two points or either
/// column is constant (the statistic is undefined there).
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for k in 0..a.len() {
        let da = ra[k] - mean;
        let db = rb[k] - mean;
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return None;
    }
    Some(cov / (var_a.sqrt() * var_b.sqrt()))
}

/// Mean absolute difference between two stacks of N x W tensors,
/// restricted to row `v`.
fn row_mean_abs_diff(a: &[Tensor], b: &[Tensor], v: usize) -> f64 {
    let mut acc = 0.0;
    let mut count = 0usize;
    for (x, y) in a.iter().zip(b) {
        let w = x.shape()[1];
        for k in 0..w {
            acc += (x.get2(v, k) - y.get2(v, k)).abs();
            count += 1;
        }
    }
    acc / count as f64
}

/// Mean of row `v` over a stack of N x W tensors.
fn row_mean(a: &[Tensor], v: usize) -> f64 {
    let mut acc = 0.0;
    let mut count = 0usize;
    for x in a {
        let w = x.shape()[1];
        for k in 0..w {
            acc += x.get2(v, k);
            count += 1;
        }
    }
    acc / count as f64
}

/// Per-(masked variable, window) reconstruction error and sigma, plus
/// the Spearman correlation between the two columns.
pub fn uncertainty_diagnostics(
    model: &ForecastModel,
    set: &WindowSet,
    mask: &[bool],
    seed: u64,
) -> Result<(Vec<DiagnosticRow>, Option<f64>)> {
    let masked: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| !m)
        .map(|(v, _)| v)
        .collect();
    if masked.is_empty() {
        return Err(IbnError::NoMaskedVariables);
    }
    if set.is_empty() {
        return Err(IbnError::invalid("diagnostics require at least one window"));
    }
    let all_observed = vec![true; mask.len()];
    let mut rows = Vec::with_capacity(masked.len() * set.len());
    for (wi, w) in set.windows.iter().enumerate() {
        let streams = DropoutStreams::eval(seed, wi as u64);
        let mut mc = ForwardTrace::default();
        model.forward_opts(&w.x, mask, &streams, false, Some(&mut mc))?;
        let mut reference = ForwardTrace::default();
        model.forward_opts(&w.x_full, &all_observed, &streams, true, Some(&mut reference))?;
        for &v in &masked {
            let mut err = row_mean_abs_diff(&mc.u_fwd, &reference.u_fwd, v);
            let mut sig = row_mean(&mc.sigma_fwd, v);
            if !mc.u_bwd.is_empty() {
                err = 0.5 * (err + row_mean_abs_diff(&mc.u_bwd, &reference.u_bwd, v));
                sig = 0.5 * (sig + row_mean(&mc.sigma_bwd, v));
            }
            rows.push(DiagnosticRow {
                variable: v,
                window: wi,
                reconstruction_error: err,
                sigma: sig,
            });
        }
    }
    let errs: Vec<f64> = rows.iter().map(|r| r.reconstruction_error).collect();
    let sigs: Vec<f64> = rows.iter().map(|r| r.sigma).collect();
    Ok((rows.clone(), spearman(&errs, &sigs)))
}

/// CSV with one row per (variable, window); `ids` maps variable indices
/// to names.
pub fn write_diagnostics_csv(path: &Path, ids: &[String], rows: &[DiagnosticRow]) -> Result<()> {
    let mut out = String::from("variable,window,reconstruction_error,sigma\n");
    for r in rows {
        let name = ids
            .get(r.variable)
            .map(|s| s.as_str())
            .ok_or_else(|| IbnError::invalid(format!("no id for variable {}", r.variable)))?;
        let _ = writeln!(
            out,
            "{},{},{:.16e},{:.16e}",
            name, r.window, r.reconstruction_error, r.sigma
        );
    }
    std::fs::write(path, out).map_err(|e| IbnError::io(path.display().to_string(), e))
}

/// The two spatial graphs for one window: the static predefined
/// adjacency and the dynamic Gaussian-kernel adjacency averaged over the
/// window's time steps.
pub fn export_adjacency(
    model: &ForecastModel,
    x: &Tensor,
    mask: &[bool],
    seed: u64,
) -> Result<(Tensor, Tensor)> {
    let mut trace = ForwardTrace::default();
    model.forward_opts(x, mask, &DropoutStreams::eval(seed, 0), false, Some(&mut trace))?;
    if trace.a_dyn_fwd.is_empty() {
        return Err(IbnError::invalid("forward pass traced no dynamic adjacency"));
    }
    let mut mean = Tensor::zeros(trace.a_dyn_fwd[0].shape());
    for a in &trace.a_dyn_fwd {
        mean.add_assign(a);
    }
    mean.scale_assign(1.0 / trace.a_dyn_fwd.len() as f64);
    Ok((model.a_pre.clone(), mean))
}

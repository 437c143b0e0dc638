//! Missing-variable reconstruction: attention interpolation over node
//! embeddings, then an uncertainty-weighted stochastic linear layer.
//!
//! The stochastic layer runs S Monte Carlo dropout passes of the same
//! affine map, takes the sample mean mu and population standard deviation
//! sigma, and emits x_hat = mu / (1 + sigma). Dropout stays active at
//! evaluation time; that is what makes sigma an uncertainty estimate.

use crate::autodiff::{Tape, VarId};
use crate::error::{IbnError, Result};
use crate::rng::{DropoutKey, DropoutStreams};
use crate::tensor::Tensor;

/// Attention-based interpolation of missing rows.
///
/// `x` holds one row per variable. Rows with `mask[i] = true` are observed
/// and pass through untouched; a missing row is rebuilt as a convex
/// combination of the observed rows, weighted by softmax of scaled
/// embedding dot products restricted to observed columns. When `proj` is
/// given, the input is first mapped through the affine projection
/// (raw channel width to model width; first layer only).
pub fn interpolation_attention(
    tape: &mut Tape,
    x: VarId,
    mask: &[bool],
    embed: VarId,
    proj: Option<(VarId, VarId)>,
) -> Result<VarId> {
    let x_p = match proj {
        Some((w, b)) => {
            let projected = tape.matmul(x, w)?;
            tape.add_bias(projected, b)?
        }
        None => x,
    };
    let n = tape.shape(x_p)[0];
    if mask.len() != n {
        return Err(IbnError::invalid(format!(
            "mask length {} does not match {} variables",
            mask.len(),
            n
        )));
    }
    if mask.iter().all(|&m| m) {
        return Ok(x_p);
    }
    if !mask.iter().any(|&m| m) {
        return Err(IbnError::AllVariablesMissing);
    }

    let (rows, d_e) = tape.value(embed).dims2()?;
    if rows != n {
        return Err(IbnError::invalid(format!(
            "embedding has {rows} rows for {n} variables"
        )));
    }
    let et = tape.transpose(embed)?;
    let scores = tape.matmul(embed, et)?;
    let scaled = tape.affine(scores, 1.0 / (d_e as f64).sqrt(), 0.0);

    // Additive column bias: a large negative constant on missing columns
    // underflows to an exact zero attention weight after the softmax's
    // max subtraction, so missing values cannot leak into the imputation.
    let mut bias = vec![0.0; n * n];
    for j in 0..n {
        if !mask[j] {
            for i in 0..n {
                bias[i * n + j] = -1e30;
            }
        }
    }
    let bias_c = tape.constant(Tensor::new(vec![n, n], bias)?);
    let masked = tape.add(scaled, bias_c)?;
    let attn = tape.softmax(masked);
    let imputed = tape.matmul(attn, x_p)?;
    tape.select_rows(mask, x_p, imputed)
}

#[derive(Clone, Copy, Debug)]
pub struct UaiConfig {
    /// Dropout rate for the Monte Carlo passes.
    pub p: f64,
    /// Number of Monte Carlo samples.
    pub s: usize,
    /// Single deterministic pass: no dropout, sigma identically zero.
    /// Used by the interpolation-only ablation.
    pub deterministic: bool,
}

pub struct UaiOutput {
    pub mu: VarId,
    pub sigma: VarId,
    pub x_hat: VarId,
}

/// S dropout passes of x.W + b reduced to (mu, sigma, mu/(1+sigma)).
///
/// The key's `sample` field is overwritten with 1..=S, one substream per
/// pass; all other key fields identify the call site. When the passes
/// cannot differ (p = 0, s = 1, or deterministic mode) a single pass is
/// taken and sigma is an exact zero, not a rounded sample statistic.
pub fn uai_forward(
    tape: &mut Tape,
    x_ia: VarId,
    w: VarId,
    b: VarId,
    cfg: &UaiConfig,
    streams: &DropoutStreams,
    key: DropoutKey,
) -> Result<UaiOutput> {
    if cfg.s == 0 {
        return Err(IbnError::invalid("Monte Carlo sample count must be at least 1"));
    }
    if !(0.0..1.0).contains(&cfg.p) {
        return Err(IbnError::invalid(format!(
            "dropout rate {} outside [0, 1)",
            cfg.p
        )));
    }
    let projected = tape.matmul(x_ia, w)?;
    let linear = tape.add_bias(projected, b)?;
    let shape = tape.shape(linear).to_vec();

    let dropout_is_identity = cfg.deterministic || cfg.p == 0.0;
    if dropout_is_identity || cfg.s == 1 {
        let mu = if dropout_is_identity {
            linear
        } else {
            let mask = streams.keep_mask(DropoutKey { sample: 1, ..key }, &shape, cfg.p);
            tape.dropout_apply(linear, &mask, cfg.p)?
        };
        let sigma = tape.constant(Tensor::zeros(&shape));
        return Ok(UaiOutput {
            mu,
            sigma,
            x_hat: mu,
        });
    }

    let samples: Vec<VarId> = (1..=cfg.s as u32)
        .map(|s_idx| {
            let mask = streams.keep_mask(DropoutKey { sample: s_idx, ..key }, &shape, cfg.p);
            tape.dropout_apply(linear, &mask, cfg.p)
        })
        .collect::<Result<_>>()?;

    // Reductions run in sample-index order for bit reproducibility.
    let mut acc = samples[0];
    for &s in &samples[1..] {
        acc = tape.add(acc, s)?;
    }
    let mu = tape.affine(acc, 1.0 / cfg.s as f64, 0.0);

    let mut var_acc: Option<VarId> = None;
    for &s in &samples {
        let diff = tape.sub(s, mu)?;
        let sq = tape.mul(diff, diff)?;
        var_acc = Some(match var_acc {
            Some(a) => tape.add(a, sq)?,
            None => sq,
        });
    }
    let variance = tape.affine(var_acc.unwrap(), 1.0 / cfg.s as f64, 0.0);
    let sigma = tape.sqrt(variance);
    let x_hat = uai_combine(tape, mu, sigma)?;
    Ok(UaiOutput { mu, sigma, x_hat })
}

/// The uncertainty down-weighting mu / (1 + sigma). For fixed mu > 0 the
/// result strictly decreases as sigma grows.
pub fn uai_combine(tape: &mut Tape, mu: VarId, sigma: VarId) -> Result<VarId> {
    let denom = tape.affine(sigma, 1.0, 1.0);
    tape.div(mu, denom)
}

//! Dataset preparation: chronological splitting, z-score normalization,
//! variable-level masking, and sliding-window materialization.
//!
//! Pipeline order is load -> split -> normalize (train statistics only)
//! -> window -> mask. Masking zero-fills whole variables after
//! normalization, so a masked entry equals the variable's training mean
//! in original units. The same mask applies to every split: the setting
//! is "this sensor is absent", not "this reading dropped out".

pub mod io;
pub mod synthetic;

use crate::error::{IbnError, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;

/// A raw multivariate series: `values` is T x N (rows are time steps).
#[derive(Clone, Debug)]
pub struct SeriesSet {
    pub values: Tensor,
    pub ids: Vec<String>,
    pub coords: Option<Tensor>,
}

impl SeriesSet {
    pub fn t_len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_vars(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Per-variable affine normalization fitted on the training rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Fit on rows `range` of a T x N matrix. A degenerate variable
    /// (zero or negative spread) gets std clamped to 1 so it scales to
    /// exact zeros instead of dividing by zero.
    pub fn fit(values: &Tensor, range: std::ops::Range<usize>) -> Result<Scaler> {
        let (_, n) = values.dims2()?;
        let count = range.len();
        if count == 0 {
            return Err(IbnError::invalid("cannot fit scaler on an empty split"));
        }
        let mut mean = vec![0.0; n];
        for t in range.clone() {
            for v in 0..n {
                mean[v] += values.get2(t, v);
            }
        }
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
        let mut std = vec![0.0; n];
        for t in range {
            for v in 0..n {
                let d = values.get2(t, v) - mean[v];
                std[v] += d * d;
            }
        }
        for s in std.iter_mut() {
            *s = (*s / count as f64).sqrt();
            if *s <= 0.0 {
                *s = 1.0;
            }
        }
        Ok(Scaler { mean, std })
    }

    pub fn apply(&self, value: f64, var: usize) -> f64 {
        (value - self.mean[var]) / self.std[var]
    }

    pub fn invert(&self, value: f64, var: usize) -> f64 {
        value * self.std[var] + self.mean[var]
    }
}

/// Chronological 70/10/20 row ranges. Windows are cut inside each range
/// separately, so no sample straddles a boundary.
pub fn chronological_split(t_len: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>) {
    let train_end = (t_len as f64 * 0.7).floor() as usize;
    let val_end = (t_len as f64 * 0.8).floor() as usize;
    (0..train_end, train_end..val_end, val_end..t_len)
}

/// One forecasting sample: masked input, the unmasked input it came from,
/// and the (never masked) target.
#[derive(Clone, Debug)]
pub struct Window {
    /// N x H x 1, zero-filled at masked variables.
    pub x: Tensor,
    /// N x H x 1 before masking; diagnostics compare against this.
    pub x_full: Tensor,
    /// N x L.
    pub y: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct WindowSet {
    pub windows: Vec<Window>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Cut sliding windows from normalized rows `range` of a T x N matrix.
/// Stride 1: the k-th window's input starts at `range.start + k`.
pub fn window_range(
    values: &Tensor,
    scaler: &Scaler,
    range: std::ops::Range<usize>,
    h: usize,
    l: usize,
) -> Result<Vec<(Tensor, Tensor)>> {
    let (_, n) = values.dims2()?;
    let rows = range.len();
    if rows < h + l {
        return Err(IbnError::invalid(format!(
            "split of {rows} rows is too short for history {h} + horizon {l}"
        )));
    }
    let count = rows - h - l + 1;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let start = range.start + k;
        let mut x = Tensor::zeros(&[n, h, 1]);
        for v in 0..n {
            for t in 0..h {
                x.data_mut()[v * h + t] = scaler.apply(values.get2(start + t, v), v);
            }
        }
        let mut y = Tensor::zeros(&[n, l]);
        for v in 0..n {
            for j in 0..l {
                y.data_mut()[v * l + j] = scaler.apply(values.get2(start + h + j, v), v);
            }
        }
        out.push((x, y));
    }
    Ok(out)
}

/// Choose exactly floor(rate * n) variables to mask, uniformly without
/// replacement. Returns the observability mask (true = observed). The
/// draw depends only on (seed, n, rate), never on the data.
pub fn draw_variable_mask(n: usize, rate: f64, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(IbnError::invalid(format!(
            "mask rate {rate} must lie in [0, 1)"
        )));
    }
    let k = (rate * n as f64).floor() as usize;
    let mut mask = vec![true; n];
    if k == 0 {
        return Ok(mask);
    }
    let mut rng = stream(seed, Purpose::MaskDraw, &[n as u64, (rate * 1e9) as u64]);
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);
    for &i in indices.iter().take(k) {
        mask[i] = false;
    }
    Ok(mask)
}

/// Zero-fill the masked variables of an N x H x C input window.
pub fn mask_window(x: &Tensor, mask: &[bool]) -> Tensor {
    let n = x.shape()[0];
    let per_var = x.numel() / n;
    let mut out = x.clone();
    for (v, &observed) in mask.iter().enumerate().take(n) {
        if !observed {
            for e in &mut out.data_mut()[v * per_var..(v + 1) * per_var] {
                *e = 0.0;
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
    pub mask: Vec<bool>,
    pub scaler: Scaler,
    pub h: usize,
    pub l: usize,
}

/// Full preparation pipeline for one experiment.
pub fn prepare_dataset(
    series: &SeriesSet,
    h: usize,
    l: usize,
    mask_rate: f64,
    seed: u64,
) -> Result<Dataset> {
    let t_len = series.t_len();
    if t_len < h + l {
        return Err(IbnError::invalid(format!(
            "series of {t_len} rows is too short for history {h} + horizon {l}"
        )));
    }
    if !series.values.all_finite() {
        return Err(IbnError::NonFinite("series contains NaN or Inf".to_string()));
    }
    let (train_r, val_r, test_r) = chronological_split(t_len);
    let scaler = Scaler::fit(&series.values, train_r.clone())?;
    let mask = draw_variable_mask(series.n_vars(), mask_rate, seed)?;
    let build = |range: std::ops::Range<usize>| -> Result<WindowSet> {
        let pairs = window_range(&series.values, &scaler, range, h, l)?;
        Ok(WindowSet {
            windows: pairs
                .into_iter()
                .map(|(x_full, y)| Window {
                    x: mask_window(&x_full, &mask),
                    x_full,
                    y,
                })
                .collect(),
        })
    };
    Ok(Dataset {
        train: build(train_r)?,
        val: build(val_r)?,
        test: build(test_r)?,
        mask,
        scaler,
        h,
        l,
    })
}

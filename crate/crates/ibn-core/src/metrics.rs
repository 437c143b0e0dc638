//! Forecast accuracy metrics, computed in original units after inverse
//! scaling. MAPE excludes entries whose true magnitude is below 1e-3;
//! if every entry of a column is excluded the value is reported as
//! not-available rather than zero.

use crate::error::{IbnError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Magnitudes at or below this threshold are excluded from MAPE.
pub const MAPE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; None when every entry was excluded by the magnitude floor.
    pub mape: Option<f64>,
    pub mae_per_var: Vec<f64>,
    pub rmse_per_var: Vec<f64>,
    pub mape_per_var: Vec<Option<f64>>,
}

/// Accumulates absolute, squared, and percentage errors over one stream
/// of entries.
#[derive(Default)]
struct Accum {
    abs: f64,
    sq: f64,
    pct: f64,
    count: usize,
    pct_count: usize,
}

impl Accum {
    fn push(&mut self, truth: f64, pred: f64) {
        let err = (truth - pred).abs();
        self.abs += err;
        self.sq += err * err;
        self.count += 1;
        if truth.abs() > MAPE_FLOOR {
            self.pct += err / truth.abs();
            self.pct_count += 1;
        }
    }

    fn mae(&self) -> f64 {
        self.abs / self.count as f64
    }

    fn rmse(&self) -> f64 {
        (self.sq / self.count as f64).sqrt()
    }

    fn mape(&self) -> Option<f64> {
        if self.pct_count == 0 {
            None
        } else {
            Some(self.pct / self.pct_count as f64 * 100.0)
        }
    }
}

/// Metrics over an N x L truth/prediction pair. Per-variable values
/// aggregate that variable's row; overall values aggregate every entry.
pub fn metrics(y: &Tensor, y_hat: &Tensor) -> Result<MetricReport> {
    if y.shape() != y_hat.shape() {
        return Err(IbnError::ShapeMismatch {
            op: "metrics",
            lhs: y.shape().to_vec(),
            rhs: y_hat.shape().to_vec(),
        });
    }
    let (n, l) = y.dims2()?;
    if n == 0 || l == 0 {
        return Err(IbnError::invalid("metrics require a non-empty matrix"));
    }
    let mut overall = Accum::default();
    let mut mae_per_var = Vec::with_capacity(n);
    let mut rmse_per_var = Vec::with_capacity(n);
    let mut mape_per_var = Vec::with_capacity(n);
    for v in 0..n {
        let mut acc = Accum::default();
        for j in 0..l {
            let truth = y.get2(v, j);
            let pred = y_hat.get2(v, j);
            acc.push(truth, pred);
            overall.push(truth, pred);
        }
        mae_per_var.push(acc.mae());
        rmse_per_var.push(acc.rmse());
        mape_per_var.push(acc.mape());
    }
    Ok(MetricReport {
        mae: overall.mae(),
        rmse: overall.rmse(),
        mape: overall.mape(),
        mae_per_var,
        rmse_per_var,
        mape_per_var,
    })
}

/// Metrics over a list of per-window truth/prediction pairs, treating
/// the concatenation as one long horizon per variable.
pub fn metrics_over_windows(pairs: &[(Tensor, Tensor)]) -> Result<MetricReport> {
    let Some(((first_y, _), rest)) = pairs.split_first() else {
        return Err(IbnError::invalid("metrics require at least one window"));
    };
    let (n, l) = first_y.dims2()?;
    let total = l * pairs.len();
    let mut y_all = Tensor::zeros(&[n, total]);
    let mut y_hat_all = Tensor::zeros(&[n, total]);
    for (w, (y, y_hat)) in std::iter::once((first_y, &pairs[0].1))
        .chain(rest.iter().map(|(a, b)| (a, b)))
        .enumerate()
    {
        if y.shape() != first_y.shape() || y_hat.shape() != first_y.shape() {
            return Err(IbnError::ShapeMismatch {
                op: "metrics window",
                lhs: y.shape().to_vec(),
                rhs: first_y.shape().to_vec(),
            });
        }
        for v in 0..n {
            for j in 0..l {
                y_all.set2(v, w * l + j, y.get2(v, j));
                y_hat_all.set2(v, w * l + j, y_hat.get2(v, j));
            }
        }
    }
    metrics(&y_all, &y_hat_all)
}

//! Ablation harness: trains the full model and its three single-component
//! reductions on identical data with identical seeds, then tabulates test
//! metrics side by side.

use crate::data::Dataset;
use crate::error::{IbnError, Result};
use crate::metrics::MetricReport;
use crate::model::{AblationFlags, ForecastModel, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{evaluate, train, TrainConfig};
use std::fmt::Write as _;
use std::path::Path;

/// The four configurations of the component study, in report order.
pub fn variants() -> [(&'static str, AblationFlags); 4] {
    [
        ("ibn", AblationFlags::default()),
        (
            "uai_to_ia",
            AblationFlags {
                uai_to_ia: true,
                ..AblationFlags::default()
            },
        ),
        (
            "ggcn_to_agcn",
            AblationFlags {
                ggcn_to_agcn: true,
                ..AblationFlags::default()
            },
        ),
        (
            "bi_to_uni",
            AblationFlags {
                bi_to_uni: true,
                ..AblationFlags::default()
            },
        ),
    ]
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub variant: &'static str,
    pub seed: u64,
    pub param_count: usize,
    pub epochs_run: usize,
    pub report: MetricReport,
}

/// Train and evaluate one variant. The seed drives initialization,
/// masking-independent dropout, and shuffling; the dataset (including its
/// variable mask) is shared across variants.
pub fn run_variant(
    variant: &'static str,
    flags: AblationFlags,
    data: &Dataset,
    a_pre: &Tensor,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<AblationResult> {
    let mut model = ForecastModel::new(*model_cfg, flags, a_pre.clone(), train_cfg.seed)?;
    let param_count = model.store.numel();
    let history = train(&mut model, data, train_cfg)?;
    let report = evaluate(&model, &data.test, &data.mask, &data.scaler, train_cfg.seed)?;
    Ok(AblationResult {
        variant,
        seed: train_cfg.seed,
        param_count,
        epochs_run: history.len(),
        report,
    })
}

/// Run all four variants for each seed. Results are grouped by variant
/// in the order of [`variants`], seeds in the given order within each.
pub fn run_ablation(
    data_per_seed: &[(u64, Dataset, Tensor)],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<Vec<AblationResult>> {
    if data_per_seed.is_empty() {
        return Err(IbnError::invalid("ablation requires at least one seed"));
    }
    let mut results = Vec::new();
    for (variant, flags) in variants() {
        for (seed, data, a_pre) in data_per_seed {
            let cfg = TrainConfig {
                seed: *seed,
                ..train_cfg.clone()
            };
            results.push(run_variant(variant, flags, data, a_pre, model_cfg, &cfg)?);
        }
    }
    Ok(results)
}

/// Mean test MAE per variant, keyed by variant name, preserving report
/// order.
pub fn mean_mae_by_variant(results: &[AblationResult]) -> Vec<(&'static str, f64)> {
    variants()
        .iter()
        .map(|(name, _)| {
            let runs: Vec<&AblationResult> =
                results.iter().filter(|r| r.variant == *name).collect();
            let mean = runs.iter().map(|r| r.report.mae).sum::<f64>() / runs.len() as f64;
            (*name, mean)
        })
        .collect()
}

/// Wide comparison table: one row per dataset, seed-averaged
/// variant x metric columns.
pub fn write_ablation_csv(
    path: &Path,
    dataset_name: &str,
    results: &[AblationResult],
) -> Result<()> {
    let mut header = String::from("dataset");
    let mut row = dataset_name.to_string();
    for (name, _) in variants() {
        let runs: Vec<&AblationResult> = results.iter().filter(|r| r.variant == name).collect();
        if runs.is_empty() {
            return Err(IbnError::invalid(format!("no results for variant {name}")));
        }
        let k = runs.len() as f64;
        let mae = runs.iter().map(|r| r.report.mae).sum::<f64>() / k;
        let rmse = runs.iter().map(|r| r.report.rmse).sum::<f64>() / k;
        let mape: Option<f64> = runs
            .iter()
            .map(|r| r.report.mape)
            .try_fold(0.0, |acc, m| m.map(|v| acc + v))
            .map(|sum| sum / k);
        let _ = write!(header, ",{name}_mae,{name}_rmse,{name}_mape");
        let _ = write!(
            row,
            ",{:.16e},{:.16e},{}",
            mae,
            rmse,
            mape.map_or("NA".to_string(), |v| format!("{v:.16e}"))
        );
    }
    let content = format!("{header}\n{row}\n");
    std::fs::write(path, content).map_err(|e| IbnError::io(path.display().to_string(), e))
}

/// Long-format per-run table, one row per (variant, seed).
pub fn write_ablation_runs_csv(path: &Path, results: &[AblationResult]) -> Result<()> {
    let mut out = String::from("variant,seed,param_count,epochs_run,mae,rmse,mape\n");
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.16e},{:.16e},{}",
            r.variant,
            r.seed,
            r.param_count,
            r.epochs_run,
            r.report.mae,
            r.report.rmse,
            r.report
                .mape
                .map_or("NA".to_string(), |v| format!("{v:.16e}"))
        );
    }
    std::fs::write(path, out).map_err(|e| IbnError::io(path.display().to_string(), e))
}

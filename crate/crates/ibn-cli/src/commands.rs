//! The five subcommands. Each one resolves its inputs, creates a run
//! directory, writes the manifest before the long work starts, and
//! leaves every artifact as a file under that directory.

use crate::config::{load_config, Config, DataSection, SynthSection};
use crate::rundir::{
    code_version, create_run_dir, dataset_fingerprint, now_rfc3339, read_manifest, write_complete,
    write_json, write_manifest, RunManifest,
};
use crate::CliError;
use ibn_core::ablate::{mean_mae_by_variant, run_ablation, write_ablation_csv, write_ablation_runs_csv};
use ibn_core::data::io::{
    load_adjacency_csv, load_coords_csv, load_series_csv, write_adjacency_csv, write_coords_csv,
    write_series_csv,
};
use ibn_core::data::synthetic::{generate_synthetic, median_off_diagonal, SynthParams};
use ibn_core::data::{prepare_dataset, Dataset, SeriesSet};
use ibn_core::diagnostics::{export_adjacency, uncertainty_diagnostics, write_diagnostics_csv};
use ibn_core::graph::{build_predefined, pairwise_euclidean};
use ibn_core::metrics::MetricReport;
use ibn_core::model::ForecastModel;
use ibn_core::train::{
    evaluate, lvcf_baseline, restore_best, split_mae, train_mean_baseline, train_session,
    write_history_csv, TrainSession,
};
use ibn_core::Tensor;
use serde::Serialize;
use std::path::{Path, PathBuf};

pub struct SynthArgs {
    pub n: usize,
    pub t: usize,
    pub seed: u64,
    pub params: SynthParams,
    pub out: PathBuf,
}

/// Series, static graph, and provenance for one experiment.
pub struct DataBundle {
    pub series: SeriesSet,
    pub a_pre: Tensor,
    pub fingerprint: String,
    pub name: String,
}

/// Resolve the data section: generate a synthetic set under `seed`, or
/// load the configured CSV files. With coordinate files the predefined
/// graph uses Gaussian weights thresholded at the median pairwise
/// distance, the same construction the generator uses.
pub fn load_data(config: &Config, seed: u64) -> Result<DataBundle, CliError> {
    let data = &config.data;
    if let Some(synth) = &data.synth {
        let out = generate_synthetic(synth.n, synth.t, seed, &synth.params())
            .map_err(|e| CliError::Config(e.to_string()))?;
        let fingerprint = dataset_fingerprint(&out.series, &out.adjacency);
        return Ok(DataBundle {
            series: out.series,
            a_pre: out.adjacency,
            fingerprint,
            name: format!("synth-n{}-t{}", synth.n, synth.t),
        });
    }
    let series_path = data
        .series
        .as_ref()
        .expect("config validation guarantees a data source");
    let series = load_series_csv(Path::new(series_path))?;
    let a_pre = match (&data.adjacency, &data.coords) {
        (Some(adj_path), _) => {
            let a = load_adjacency_csv(Path::new(adj_path))?;
            if a.shape() != [series.n_vars(), series.n_vars()] {
                return Err(CliError::Config(format!(
                    "adjacency {adj_path} is {:?} but the series has {} variables",
                    a.shape(),
                    series.n_vars()
                )));
            }
            a
        }
        (None, Some(coords_path)) => {
            let (ids, coords) = load_coords_csv(Path::new(coords_path))?;
            if ids != series.ids {
                return Err(CliError::Config(format!(
                    "coordinate ids in {coords_path} do not match the series header"
                )));
            }
            let dist = pairwise_euclidean(&coords)?;
            build_predefined(&coords, median_off_diagonal(&dist))?
        }
        (None, None) => unreachable!("config validation guarantees a graph source"),
    };
    let fingerprint = dataset_fingerprint(&series, &a_pre);
    let name = Path::new(series_path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| series_path.clone());
    Ok(DataBundle {
        series,
        a_pre,
        fingerprint,
        name,
    })
}

fn prepare(config: &Config, bundle: &DataBundle, seed: u64) -> Result<Dataset, CliError> {
    prepare_dataset(
        &bundle.series,
        config.model.h,
        config.model.l,
        config.mask.rate,
        seed,
    )
    .map_err(|e| CliError::Config(e.to_string()))
}

fn build_model(config: &Config, bundle: &DataBundle, seed: u64) -> Result<ForecastModel, CliError> {
    ForecastModel::new(
        config.model_config(bundle.series.n_vars()),
        config.ablation_flags(),
        bundle.a_pre.clone(),
        seed,
    )
    .map_err(|e| CliError::Config(e.to_string()))
}

pub fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let out = generate_synthetic(args.n, args.t, args.seed, &args.params)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let dir = create_run_dir(&args.out, args.seed)?;
    let config = Config {
        data: DataSection {
            synth: Some(SynthSection {
                n: args.n,
                t: args.t,
                alpha: args.params.alpha,
                beta: args.params.beta,
                period: args.params.period,
                noise_std: args.params.noise_std,
            }),
            ..DataSection::default()
        },
        ..Config::default()
    };
    write_manifest(
        &dir,
        &RunManifest {
            config,
            seed: args.seed,
            dataset_fingerprint: dataset_fingerprint(&out.series, &out.adjacency),
            code_version: code_version(),
            started_at: now_rfc3339(),
            ended_at: None,
        },
    )?;
    write_series_csv(&dir.join("series.csv"), &out.series)?;
    write_adjacency_csv(&dir.join("adj.csv"), &out.adjacency)?;
    let coords = out
        .series
        .coords
        .as_ref()
        .expect("generator always attaches coordinates");
    write_coords_csv(&dir.join("coords.csv"), &out.series.ids, coords)?;
    write_json(&dir.join("meta.json"), &out.meta)?;
    write_complete(&dir)?;
    println!("run_dir {}", dir.display());
    println!("series {} x {}", args.t, args.n);
    Ok(())
}

#[derive(Serialize)]
struct TrainReport {
    /// Best validation MAE seen during training (normalized scale).
    val_mae: f64,
    epochs_run: usize,
    test: MetricReport,
    baseline_lvcf: MetricReport,
    baseline_train_mean: MetricReport,
}

pub fn cmd_train(config_path: &Path, overrides: &[String], out_root: &Path) -> Result<(), CliError> {
    let config = load_config(config_path, overrides)?;
    let seed = config.train.seed;
    let bundle = load_data(&config, seed)?;
    let dataset = prepare(&config, &bundle, seed)?;
    let mut model = build_model(&config, &bundle, seed)?;
    let train_cfg = config.train_config();
    train_cfg
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;

    let dir = create_run_dir(out_root, seed)?;
    write_manifest(
        &dir,
        &RunManifest {
            config: config.clone(),
            seed,
            dataset_fingerprint: bundle.fingerprint.clone(),
            code_version: code_version(),
            started_at: now_rfc3339(),
            ended_at: None,
        },
    )?;

    let mut session = TrainSession::new(&model);
    train_session(&mut model, &dataset, &train_cfg, &mut session, None)?;
    restore_best(&mut model, &session)?;
    write_history_csv(&dir.join("history.csv"), &session.history)?;
    save_run_checkpoint(&dir, &model, &session)?;

    let report = TrainReport {
        val_mae: session
            .best_val
            .expect("a finished run has at least one validation epoch"),
        epochs_run: session.history.len(),
        test: evaluate(&model, &dataset.test, &dataset.mask, &dataset.scaler, seed)?,
        baseline_lvcf: lvcf_baseline(&dataset.test, &dataset.scaler)?,
        baseline_train_mean: train_mean_baseline(&dataset.test, &dataset.scaler)?,
    };
    write_json(&dir.join("report.json"), &report)?;
    write_complete(&dir)?;
    println!("run_dir {}", dir.display());
    println!("epochs {}", report.epochs_run);
    println!("val_mae {:.6}", report.val_mae);
    println!("test_mae {:.6}", report.test.mae);
    Ok(())
}

fn save_run_checkpoint(
    dir: &Path,
    model: &ForecastModel,
    session: &TrainSession,
) -> Result<(), CliError> {
    ibn_core::checkpoint::save_checkpoint(&dir.join("checkpoint"), model, Some(session))
        .map_err(|e| CliError::Runtime(e.to_string()))
}

#[derive(Serialize)]
struct EvalReport {
    /// Validation MAE recomputed from the stored weights; matches the
    /// training run's best epoch bit for bit.
    val_mae: f64,
    test: MetricReport,
}

pub fn cmd_eval(run_dir: &Path) -> Result<(), CliError> {
    let manifest = read_manifest(run_dir)?;
    let seed = manifest.seed;
    let bundle = load_data(&manifest.config, seed)?;
    if bundle.fingerprint != manifest.dataset_fingerprint {
        return Err(CliError::Runtime(format!(
            "dataset fingerprint mismatch: manifest {} vs resolved {}",
            manifest.dataset_fingerprint, bundle.fingerprint
        )));
    }
    let dataset = prepare(&manifest.config, &bundle, seed)?;
    let (model, _) = ibn_core::checkpoint::load_checkpoint(&run_dir.join("checkpoint"))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let report = EvalReport {
        val_mae: split_mae(&model, &dataset.val, &dataset.mask, seed)?,
        test: evaluate(&model, &dataset.test, &dataset.mask, &dataset.scaler, seed)?,
    };
    write_json(&run_dir.join("eval_report.json"), &report)?;
    println!("run_dir {}", run_dir.display());
    println!("val_mae {:.6}", report.val_mae);
    println!("test_mae {:.6}", report.test.mae);
    Ok(())
}

pub fn cmd_ablate(
    config_path: &Path,
    overrides: &[String],
    out_root: &Path,
) -> Result<(), CliError> {
    let config = load_config(config_path, overrides)?;
    let seeds = config.ablation_seeds();
    let mut data_per_seed = Vec::with_capacity(seeds.len());
    let mut fingerprints = Vec::with_capacity(seeds.len());
    let mut name = String::new();
    let mut n_vars = 0;
    for &seed in &seeds {
        let bundle = load_data(&config, seed)?;
        let dataset = prepare(&config, &bundle, seed)?;
        fingerprints.push(bundle.fingerprint);
        name = bundle.name;
        n_vars = bundle.series.n_vars();
        data_per_seed.push((seed, dataset, bundle.a_pre));
    }
    let model_cfg = config.model_config(n_vars);
    let train_cfg = config.train_config();

    let dir = create_run_dir(out_root, config.train.seed)?;
    write_manifest(
        &dir,
        &RunManifest {
            config: config.clone(),
            seed: config.train.seed,
            dataset_fingerprint: fingerprints.join("+"),
            code_version: code_version(),
            started_at: now_rfc3339(),
            ended_at: None,
        },
    )?;

    let results = run_ablation(&data_per_seed, &model_cfg, &train_cfg)?;
    write_ablation_csv(&dir.join("ablation.csv"), &name, &results)?;
    write_ablation_runs_csv(&dir.join("ablation_runs.csv"), &results)?;
    write_complete(&dir)?;
    println!("run_dir {}", dir.display());
    for (variant, mean) in mean_mae_by_variant(&results) {
        println!("mean_mae {variant} {mean:.6}");
    }
    Ok(())
}

#[derive(Serialize)]
struct SpearmanReport {
    spearman: Option<f64>,
    rows: usize,
}

pub fn cmd_diagnose(
    config_path: Option<&Path>,
    checkpoint: Option<&Path>,
    overrides: &[String],
    out_root: &Path,
) -> Result<(), CliError> {
    let (config, model_source) = match (config_path, checkpoint) {
        (Some(_), Some(_)) => {
            return Err(CliError::Config(
                "--config and --checkpoint are mutually exclusive".to_string(),
            ))
        }
        (None, None) => {
            return Err(CliError::Config(
                "diagnose needs --config (untrained model) or --checkpoint (trained run)"
                    .to_string(),
            ))
        }
        (Some(path), None) => (load_config(path, overrides)?, None),
        (None, Some(run_dir)) => {
            if !overrides.is_empty() {
                return Err(CliError::Config(
                    "overrides are not allowed with --checkpoint; the stored config is final"
                        .to_string(),
                ));
            }
            let manifest = read_manifest(run_dir)?;
            (manifest.config, Some(run_dir))
        }
    };
    let seed = config.train.seed;
    let bundle = load_data(&config, seed)?;
    let dataset = prepare(&config, &bundle, seed)?;
    let model = match model_source {
        None => build_model(&config, &bundle, seed)?,
        Some(run_dir) => {
            let (model, _) = ibn_core::checkpoint::load_checkpoint(&run_dir.join("checkpoint"))
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            model
        }
    };

    let (rows, rho) = uncertainty_diagnostics(&model, &dataset.test, &dataset.mask, seed)?;
    let sample = &dataset.test.windows[0];
    let (a_pre, a_gau_mean) = export_adjacency(&model, &sample.x, &dataset.mask, seed)?;

    let dir = create_run_dir(out_root, seed)?;
    write_manifest(
        &dir,
        &RunManifest {
            config,
            seed,
            dataset_fingerprint: bundle.fingerprint,
            code_version: code_version(),
            started_at: now_rfc3339(),
            ended_at: None,
        },
    )?;
    write_diagnostics_csv(&dir.join("uncertainty.csv"), &bundle.series.ids, &rows)?;
    write_json(
        &dir.join("spearman.json"),
        &SpearmanReport {
            spearman: rho,
            rows: rows.len(),
        },
    )?;
    write_adjacency_csv(&dir.join("a_pre.csv"), &a_pre)?;
    write_adjacency_csv(&dir.join("a_gau_mean.csv"), &a_gau_mean)?;
    write_complete(&dir)?;
    println!("run_dir {}", dir.display());
    match rho {
        Some(r) => println!("spearman {r:.6}"),
        None => println!("spearman NA"),
    }
    println!("diagnostic_rows {}", rows.len());
    Ok(())
}

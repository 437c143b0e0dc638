//! `ibn`: train, evaluate, ablate, and inspect graph-recurrent
//! forecasters for multivariate series with missing variables.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
//! usage. Errors print as a single `error: ...` line on stderr.

mod commands;
mod config;
mod rundir;

use clap::{Args, Parser, Subcommand};
use ibn_core::data::synthetic::SynthParams;
use std::path::PathBuf;

/// Failures split by exit code: configuration problems (2) versus
/// everything that goes wrong while doing the work (1).
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

impl From<ibn_core::IbnError> for CliError {
    fn from(e: ibn_core::IbnError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "ibn",
    version,
    about = "Graph-recurrent forecasting with uncertainty-aware imputation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic graph-diffusion dataset.
    Synth(SynthArgs),
    /// Train a model and write history, checkpoint, and test report.
    Train(ConfigArgs),
    /// Re-evaluate a finished training run from its checkpoint.
    Eval(EvalArgs),
    /// Train all four component variants over the configured seeds.
    Ablate(ConfigArgs),
    /// Export uncertainty and adjacency diagnostics.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of variables (graph nodes).
    #[arg(long)]
    n: usize,
    /// Number of time steps.
    #[arg(long)]
    t: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Diffusion weight toward the graph-averaged neighborhood.
    #[arg(long, default_value_t = SynthParams::default().alpha)]
    alpha: f64,
    /// Seasonal amplitude.
    #[arg(long, default_value_t = SynthParams::default().beta)]
    beta: f64,
    /// Seasonal period in steps.
    #[arg(long, default_value_t = SynthParams::default().period)]
    period: f64,
    /// Innovation noise standard deviation.
    #[arg(long, default_value_t = SynthParams::default().noise_std)]
    noise_std: f64,
    /// Directory that receives the run directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; see README for the key list.
    #[arg(long)]
    config: PathBuf,
    /// Directory that receives the run directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Dotted config overrides, e.g. `--train.lr 0.001`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory of a finished training run.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// JSON config file; diagnoses a freshly initialized model.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory of a finished training run; diagnoses its model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory that receives the run directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Dotted config overrides, e.g. `--mask.rate 0.25`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => commands::cmd_synth(&commands::SynthArgs {
            n: a.n,
            t: a.t,
            seed: a.seed,
            params: SynthParams {
                alpha: a.alpha,
                beta: a.beta,
                period: a.period,
                noise_std: a.noise_std,
            },
            out: a.out,
        }),
        Command::Train(a) => commands::cmd_train(&a.config, &a.overrides, &a.out),
        Command::Eval(a) => commands::cmd_eval(&a.checkpoint),
        Command::Ablate(a) => commands::cmd_ablate(&a.config, &a.overrides, &a.out),
        Command::Diagnose(a) => commands::cmd_diagnose(
            a.config.as_deref(),
            a.checkpoint.as_deref(),
            &a.overrides,
            &a.out,
        ),
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
    }
}

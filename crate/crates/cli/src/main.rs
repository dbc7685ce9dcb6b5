//! `quiltsurv` command-line pipeline.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<quiltsurv::Error> for CliError {
    fn from(e: quiltsurv::Error) -> Self {
        if e.is_data_error() {
            CliError::Data(e.to_string())
        } else {
            CliError::Numerical(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

/// Interpretable multilevel survival modeling of post-discharge outcomes.
#[derive(Debug, Parser)]
#[command(name = "quiltsurv", version)]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (1 is the deterministic default; results do not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Prediction horizons in days, comma separated.
    #[arg(long, global = true, value_delimiter = ',', num_args = 1..)]
    pub horizons: Option<Vec<f64>>,
    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic episodes with a known ground truth.
    Simulate(SimulateArgs),
    /// Turn raw claims into modeling episodes.
    Ingest(IngestArgs),
    /// Fit or apply percentile quantization of numeric features.
    #[command(subcommand)]
    Quantize(QuantizeCommand),
    /// Fit or apply the sparse history encoder.
    #[command(subcommand)]
    History(HistoryCommand),
    /// Fit the variational posterior.
    Train(TrainArgs),
    /// Score episodes with a fitted model.
    Predict(PredictArgs),
    /// AUROC/AUPRC with bootstrap standard deviations.
    Evaluate(EvaluateArgs),
    /// Posterior summaries of placement effects per cohort.
    Effects(EffectsArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Output episodes (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    /// Output ground-truth manifest (JSON).
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of binary covariates when no model is configured.
    #[arg(long)]
    pub features: Option<usize>,
    #[arg(long)]
    pub confounding: Option<f64>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Claims as CSV or JSON lines.
    #[arg(long)]
    pub claims: PathBuf,
    /// Per-episode attributes (JSON lines keyed by person_id and admit_date).
    #[arg(long)]
    pub attributes: PathBuf,
    /// Last observed day (ISO-8601).
    #[arg(long)]
    pub observation_end: String,
    /// Optional CSV of `person_id,death_date`.
    #[arg(long)]
    pub deaths: Option<PathBuf>,
    /// Output episodes (JSON lines); the training side when splitting.
    #[arg(long)]
    pub out: PathBuf,
    /// Discharges on or after this date go to `--out-test`.
    #[arg(long, requires = "out_test")]
    pub split_date: Option<String>,
    #[arg(long, requires = "split_date")]
    pub out_test: Option<PathBuf>,
    /// Write skipped rows with reasons (JSON lines).
    #[arg(long)]
    pub rejections: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum QuantizeCommand {
    /// Learn cutoffs from a numeric CSV.
    Fit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Percentiles, comma separated (default deciles).
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        percentiles: Option<Vec<f64>>,
    },
    /// Encode a numeric CSV as binary indicator columns.
    Apply {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum HistoryCommand {
    /// Fit the encoder and median group rule on a count CSV.
    Fit {
        #[arg(long)]
        counts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        latent_dim: Option<usize>,
        #[arg(long)]
        sparsity: Option<f64>,
        /// Write the non-zero encoder weights per latent dimension (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Encode counts and assign history groups.
    Encode {
        #[arg(long)]
        counts: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training episodes (JSON lines).
    #[arg(long)]
    pub episodes: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Monte Carlo parameter draws per step.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Start α and ν at pooled data estimates.
    #[arg(long)]
    pub warm_start: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub episodes: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub episodes: PathBuf,
    /// Predictions CSV written by `predict`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Output metrics JSON.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub resamples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EffectsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output CSV, one row per cohort cell.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub draws: Option<usize>,
    /// One row per (cell, interval, placement) instead.
    #[arg(long)]
    pub long: bool,
    /// Also write per-cell baseline log-hazards to this CSV.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("quiltsurv: {e}");
            ExitCode::from(e.code())
        }
    }
}

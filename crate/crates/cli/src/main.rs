//! `smoothout` command-line experiments.
//!
//! Exit codes: 0 success, 1 output I/O failure, 2 config error, 3 data error,
//! 4 non-finite loss.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "smoothout", version, about = "Perturb-denoise training, smoothing checks and sharpness measurement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON experiment config; its `command` field must name the subcommand.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to one per core).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    /// Model preset: mnist-mlp, mnist-mlp-desk, blobs-mlp, conv-small.
    #[arg(long)]
    pub preset: Option<String>,
    /// `blobs`, `patterns`, or a directory holding the MNIST IDX files.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// sgd or adam.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Learning-rate scaling with batch size: none, linear, sqrt.
    #[arg(long)]
    pub lrs: Option<String>,
    /// Noise family: uniform, gaussian, dropout-bernoulli, or none.
    #[arg(long)]
    pub noise: Option<String>,
    /// Noise strength (implies uniform noise if no family is configured).
    #[arg(long)]
    pub a: Option<f64>,
    /// Rescale noise per filter/neuron to `a` times the weight norm.
    #[arg(long)]
    pub adaptive: bool,
    /// Keep the perturbation after each step instead of removing it.
    #[arg(long)]
    pub ablation_no_denoise: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write metrics, checkpoint and summary.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Check the smoothing constraints on two-well surfaces.
    Landscape {
        #[command(flatten)]
        common: Common,
        /// Run a single case in this dimension instead of the configured ones.
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        a: Option<f64>,
    },
    /// Measure sharpness, loss curves and noise sensitivity of a checkpoint.
    Sharpness {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Second checkpoint; curves interpolate from it to `--checkpoint`.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Train the uniform/Gaussian/adaptive/noise-only arms with matched seeds.
    CompareNoise {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
        /// Number of consecutive seeds starting at `--seed`.
        #[arg(long)]
        seeds: Option<usize>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<smoothout::Error> for CliError {
    fn from(e: smoothout::Error) -> Self {
        use smoothout::Error as E;
        let msg = e.to_string();
        match e {
            E::BadMagic { .. } | E::Truncated(_) | E::CountMismatch { .. } | E::BadCheckpoint(_) | E::Io { .. } => {
                CliError::Data(msg)
            }
            E::NonFinite { .. } => CliError::Numeric(msg),
            E::StaleRecord(_) => CliError::Other(msg),
            _ => CliError::Config(msg),
        }
    }
}

fn init_threads(n: Option<usize>) -> Result<(), CliError> {
    match n {
        Some(0) => Err(CliError::Config("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Other(e.to_string())),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common, flags } => {
            init_threads(common.threads)?;
            commands::train(&common, &flags)
        }
        Command::Landscape { common, dim, a } => {
            init_threads(common.threads)?;
            commands::landscape(&common, dim, a)
        }
        Command::Sharpness { common, preset, data, checkpoint, reference } => {
            init_threads(common.threads)?;
            commands::sharpness(&common, preset, data, checkpoint, reference)
        }
        Command::CompareNoise { common, flags, seeds } => {
            init_threads(common.threads)?;
            commands::compare_noise(&common, &flags, seeds)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // clap's own usage errors already exit 2; help and version exit 0
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("smoothout: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

//! `pointvector` command-line driver.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3
//! numeric fault, 4 gradient check failure, 5 checkpoint error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pointvector::train::Precision;
use pointvector::Error;

#[derive(Parser, Debug)]
#[command(name = "pointvector", version, about = "Train and evaluate vector-oriented point cloud networks")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parallel ablation cells.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Replace an existing run directory.
    #[arg(long, global = true)]
    pub overwrite: bool,
    /// Overrides `train.precision`.
    #[arg(long, global = true, value_enum)]
    pub precision: Option<PrecisionArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PrecisionArg {
    Single,
    Double,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Single => Precision::Single,
            PrecisionArg::Double => Precision::Double,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SuiteArg {
    /// Clean evaluation only.
    None,
    /// Clean, three z-rotations, two shifts, two scales and jitter.
    Full,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write `config.json`, `metrics.csv`, `best.ckpt` and
    /// `log.txt` to the run directory.
    Train {
        config: PathBuf,
        /// Run directory; defaults to `run/<config stem>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint under test-time perturbations.
    Eval {
        checkpoint: PathBuf,
        /// Config whose `data` section names the evaluation set.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        #[arg(long, value_enum, default_value_t = SuiteArg::Full)]
        suite: SuiteArg,
        /// Scale query radii together with the points.
        #[arg(long)]
        rescale_radius: bool,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train every cell of the `ablate` axes and write `ablate.csv`.
    Ablate {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = pointvector::gradcheck::DEFAULT_INSTANCES)]
        instances: usize,
        /// Adds an op with a deliberately wrong backward pass.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Time forward and backward passes of a model.
    Bench {
        /// Optional config; the toy segmentation model otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        points: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        iters: usize,
    },
    /// Write synthetic point files and a split manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 40)]
        val: usize,
        #[arg(long, default_value_t = 40)]
        test: usize,
        #[arg(long, default_value_t = 512)]
        points: usize,
        #[arg(long, default_value_t = 3)]
        primitives: usize,
        #[arg(long, default_value_t = 0.005)]
        noise: f64,
        /// Single-primitive clouds for classification instead of scenes.
        #[arg(long)]
        classification: bool,
    },
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NumericFault { .. } | Error::DegenerateStatistics(_) => 3,
        Error::Checkpoint(_) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

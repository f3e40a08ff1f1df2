//! Command-line driver: simulate scenarios, run the estimator with factor
//! ablations, process polarization mosaics and evaluate trajectories.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 solver
//! non-convergence under `--strict`. Diagnostics go to stderr; results go to
//! files only.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use navfuse::eval::AlignMode;

pub use commands::{eval, fuse, polar, simulate};
pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0} window solve(s) hit the iteration limit")]
    NonConvergence(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::NonConvergence(_) => 3,
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::Data(e.to_string())
            }
        }
    )*};
}

data_error!(
    navfuse::io::IoError,
    navfuse::sim::SimError,
    navfuse::fusion::FusionError,
    navfuse::eval::EvalError,
    navfuse::polarimetry::PolarError
);

#[derive(Debug, Parser)]
#[command(name = "navfuse", version, about = "Multi-sensor fusion, polarimetry and trajectory evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate ground truth and sensor streams from a scenario file.
    Simulate(SimulateArgs),
    /// Run the sliding-window estimator over a sensor-log directory.
    Fuse(FuseArgs),
    /// Turn a polarization mosaic into the packed RGB image and corner lists.
    Polar(PolarArgs),
    /// Score an estimated trajectory against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario TOML file.
    pub scenario: PathBuf,
    /// Output directory.
    pub out: PathBuf,
    /// Run configuration supplying a seed list.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed override; repeat for several trials, each written to `seed-<n>/`.
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Sensor-log directory written by `simulate`.
    pub log: PathBuf,
    /// Output directory.
    pub out: PathBuf,
    /// Run configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub no_mag: bool,
    /// Accept every magnetometer heading without the innovation gate.
    #[arg(long)]
    pub no_mag_gate: bool,
    #[arg(long)]
    pub no_flow: bool,
    #[arg(long)]
    pub no_height: bool,
    #[arg(long)]
    pub no_vio: bool,
    #[arg(long)]
    pub no_lidar: bool,
    #[arg(long)]
    pub no_loop: bool,
    /// Treat a window solve that hits the iteration limit as an error.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct PolarArgs {
    /// Binary PGM mosaic with even dimensions.
    pub mosaic: PathBuf,
    /// Output directory.
    pub out: PathBuf,
    /// Corner quality level in (0, 1); overrides the run configuration.
    #[arg(long)]
    pub quality: Option<f64>,
    /// Run configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Estimated trajectory, TUM format.
    pub estimate: PathBuf,
    /// Ground-truth trajectory, TUM format.
    pub truth: PathBuf,
    /// Output directory.
    pub out: PathBuf,
    /// none, first-pose or full-se3.
    #[arg(long, default_value = "first-pose")]
    pub align: AlignMode,
    /// Largest timestamp gap accepted when pairing poses, s.
    #[arg(long, default_value_t = 0.01)]
    pub max_dt: f64,
    /// Also report the rotation RMSE.
    #[arg(long)]
    pub rotation: bool,
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fuse(a) => fuse(a),
        Command::Polar(a) => polar(a),
        Command::Eval(a) => eval(a),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

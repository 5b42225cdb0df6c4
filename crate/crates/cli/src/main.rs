//! `nkf`: reconstruct, train, evaluate and benchmark from the command line.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{CliError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "nkf", version, about = "Watertight surface reconstruction with Neural Spline kernels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Reconstruct a mesh from an oriented point cloud (.xyz or .ply).
    Reconstruct(ReconstructArgs),
    /// Train the feature network on the procedural dataset.
    Train(TrainArgs),
    /// Compare a predicted mesh with a reference mesh.
    Eval(EvalArgs),
    /// Sweep input densities on held-out procedural shapes.
    BenchmarkDensity(BenchmarkArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Fixed,
    Learned,
    LearnedWeighted,
}

/// Solver and surfacing flags shared by reconstruction and the sweep.
#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Normal offset in normalized units [default: 1% of the bounding-box diagonal]
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    /// Marching-cubes resolution
    #[arg(long, default_value_t = 64)]
    pub grid: usize,
    #[arg(long, value_enum, default_value_t = Mode::Fixed)]
    pub mode: Mode,
    /// Trained feature network, required by the learned modes
    #[arg(long)]
    pub checkpoint: Option<std::path::PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub input: std::path::PathBuf,
    /// Mesh path (.obj or .ply)
    #[arg(long)]
    pub output: std::path::PathBuf,
    #[command(flatten)]
    pub solve: SolveArgs,
    /// Use a random subset of this many input points
    #[arg(long)]
    pub points: Option<usize>,
    /// Gaussian noise added to the input positions
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Ground-truth mesh to score the result against
    #[arg(long)]
    pub reference: Option<std::path::PathBuf>,
    /// Where to write the metric report [default: standard output]
    #[arg(long, requires = "reference")]
    pub metrics: Option<std::path::PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` training config
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Checkpoint to write
    #[arg(long)]
    pub output: std::path::PathBuf,
    /// Checkpoint to resume from
    #[arg(long)]
    pub checkpoint: Option<std::path::PathBuf>,
    /// Per-step CSV log (appended)
    #[arg(long)]
    pub metrics: Option<std::path::PathBuf>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Input points per training cloud
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Steps between progress lines
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted mesh
    #[arg(long)]
    pub input: std::path::PathBuf,
    #[arg(long)]
    pub reference: std::path::PathBuf,
    /// Report path [default: standard output]
    #[arg(long)]
    pub output: Option<std::path::PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = nkf::metrics::DEFAULT_SAMPLES)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// CSV path [default: standard output]
    #[arg(long)]
    pub output: Option<std::path::PathBuf>,
    #[command(flatten)]
    pub solve: SolveArgs,
    /// Comma-separated point counts
    #[arg(long, value_delimiter = ',', default_values_t = nkf::pipeline::DENSITY_COUNTS)]
    pub points: Vec<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of held-out procedural shapes
    #[arg(long, default_value_t = 10)]
    pub shapes: usize,
    /// Benchmark on this mesh instead of procedural shapes
    #[arg(long, conflicts_with = "shapes")]
    pub reference: Option<std::path::PathBuf>,
    #[arg(long, default_value_t = nkf::metrics::DEFAULT_SAMPLES)]
    pub samples: usize,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("NKF_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| CliError::Usage(format!("NKF_THREADS must be a count, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("NKF_THREADS: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = init_threads().and_then(|()| RunConfig::from_cli(cli)).and_then(commands::run);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

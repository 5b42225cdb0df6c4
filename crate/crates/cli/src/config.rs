use std::path::{Path, PathBuf};

use nkf::pipeline::{DensitySweep, ReconstructOptions};
use nkf::training::TrainConfig;
use nkf::{KernelMode, NkfError};
use thiserror::Error;

use crate::{Cli, Command, Mode, SolveArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] NkfError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) | Self::Runtime(NkfError::NoPoints(_)) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

fn usage(e: NkfError) -> CliError {
    CliError::Usage(e.to_string())
}

/// Kernel choice before the checkpoint is loaded.
#[derive(Debug, Clone)]
pub struct KernelChoice {
    pub mode: Mode,
    pub checkpoint: Option<PathBuf>,
}

impl KernelChoice {
    pub fn load(&self) -> Result<KernelMode, CliError> {
        let load = || -> Result<_, CliError> {
            let path = self.checkpoint.as_ref().expect("validated");
            let params = nkf::feature_field::FeatureNetworkParams::load(path)
                .map_err(|e| NkfError::Stage { stage: "checkpoint", source: Box::new(e) })?;
            Ok(std::sync::Arc::new(params))
        };
        Ok(match self.mode {
            Mode::Fixed => KernelMode::Fixed,
            Mode::Learned => KernelMode::Learned(load()?),
            Mode::LearnedWeighted => KernelMode::LearnedWeighted(load()?),
        })
    }
}

/// Fully validated settings of one invocation.
#[derive(Debug)]
pub enum RunConfig {
    Reconstruct {
        input: PathBuf,
        output: PathBuf,
        /// Options with a fixed kernel; the real mode comes from `kernel`.
        options: ReconstructOptions,
        kernel: KernelChoice,
        points: Option<usize>,
        noise: f64,
        seed: u64,
        reference: Option<PathBuf>,
        metrics: Option<PathBuf>,
    },
    Train {
        config: TrainConfig,
        output: PathBuf,
        resume: Option<PathBuf>,
        metrics: Option<PathBuf>,
        log_every: usize,
    },
    Eval {
        input: PathBuf,
        reference: PathBuf,
        output: Option<PathBuf>,
        seed: u64,
        samples: usize,
    },
    BenchmarkDensity {
        output: Option<PathBuf>,
        options: ReconstructOptions,
        kernel: KernelChoice,
        sweep: DensitySweep,
        shapes: usize,
        reference: Option<PathBuf>,
    },
}

fn check_mesh_path(path: &Path) -> Result<(), CliError> {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
        Some("obj" | "ply") => Ok(()),
        _ => Err(CliError::Usage(format!("{}: mesh output must end in .obj or .ply", path.display()))),
    }
}

fn check_noise(noise: f64) -> Result<(), CliError> {
    if noise >= 0.0 && noise.is_finite() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--noise must be finite and non-negative, got {noise}")))
    }
}

fn solve_settings(args: &SolveArgs) -> Result<(ReconstructOptions, KernelChoice), CliError> {
    let options = ReconstructOptions { epsilon: args.epsilon, lambda: args.lambda, resolution: args.grid, mode: KernelMode::Fixed };
    options.validate().map_err(usage)?;
    match args.mode {
        Mode::Fixed => {
            if args.checkpoint.is_some() {
                log::warn!("--checkpoint is ignored in fixed mode");
            }
        }
        Mode::Learned | Mode::LearnedWeighted if args.checkpoint.is_none() => {
            return Err(CliError::Usage("learned modes need --checkpoint".into()));
        }
        Mode::LearnedWeighted if args.lambda <= 0.0 => return Err(usage(NkfError::WeightedNeedsRegularization)),
        _ => {}
    }
    Ok((options, KernelChoice { mode: args.mode, checkpoint: args.checkpoint.clone() }))
}

impl RunConfig {
    pub fn from_cli(cli: Cli) -> Result<Self, CliError> {
        Ok(match cli.command {
            Command::Reconstruct(a) => {
                let (options, kernel) = solve_settings(&a.solve)?;
                check_mesh_path(&a.output)?;
                check_noise(a.noise)?;
                if a.points == Some(0) {
                    return Err(CliError::Usage("--points must be positive".into()));
                }
                RunConfig::Reconstruct {
                    input: a.input,
                    output: a.output,
                    options,
                    kernel,
                    points: a.points,
                    noise: a.noise,
                    seed: a.seed,
                    reference: a.reference,
                    metrics: a.metrics,
                }
            }
            Command::Train(a) => {
                let mut config = match &a.config {
                    Some(path) => TrainConfig::from_file(path).map_err(usage)?,
                    None => TrainConfig::default(),
                };
                if a.epsilon.is_some() {
                    config.epsilon = a.epsilon;
                }
                config.lambda = a.lambda.unwrap_or(config.lambda);
                config.input_points = a.points.unwrap_or(config.input_points);
                config.noise = a.noise.unwrap_or(config.noise);
                config.seed = a.seed.unwrap_or(config.seed);
                config.steps = a.steps.unwrap_or(config.steps);
                config.validate().map_err(usage)?;
                RunConfig::Train { config, output: a.output, resume: a.checkpoint, metrics: a.metrics, log_every: a.log_every.max(1) }
            }
            Command::Eval(a) => {
                if a.samples == 0 {
                    return Err(CliError::Usage("--samples must be positive".into()));
                }
                RunConfig::Eval { input: a.input, reference: a.reference, output: a.output, seed: a.seed, samples: a.samples }
            }
            Command::BenchmarkDensity(a) => {
                let (options, kernel) = solve_settings(&a.solve)?;
                check_noise(a.noise)?;
                if a.points.is_empty() || a.points.contains(&0) {
                    return Err(CliError::Usage("--points needs positive counts".into()));
                }
                if a.shapes == 0 || a.samples == 0 {
                    return Err(CliError::Usage("--shapes and --samples must be positive".into()));
                }
                let sweep = DensitySweep { counts: a.points, noise: a.noise, seed: a.seed, metric_samples: a.samples };
                RunConfig::BenchmarkDensity { output: a.output, options, kernel, sweep, shapes: a.shapes, reference: a.reference }
            }
        })
    }
}

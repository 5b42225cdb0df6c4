use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nkf::io::{ensure_parent, read_mesh, read_point_cloud, write_mesh};
use nkf::metrics::{MetricReport, DEFAULT_SAMPLES};
use nkf::pipeline::{benchmark_density, held_out_shapes, normalize_mesh, reconstruct, DensityRow};
use nkf::training::{TrainConfig, Trainer};
use nkf::{NkfError, OrientedPointCloud, Vec3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{CliError, RunConfig};

pub fn run(config: RunConfig) -> Result<(), CliError> {
    match config {
        RunConfig::Reconstruct { input, output, options, kernel, points, noise, seed, reference, metrics } => {
            let cloud = read_point_cloud(&input)?;
            let gt = reference.as_deref().map(read_mesh).transpose()?;
            let cloud = perturb(&cloud, points, noise, seed)?;
            let options = nkf::ReconstructOptions { mode: kernel.load()?, ..options };
            log::info!("reconstructing {} points with the {} kernel", cloud.len(), options.mode.name());
            let rec = reconstruct(&cloud, &options)?;
            for t in &rec.timings {
                log::info!("{:<10} {:>9.3} s", t.stage, t.seconds);
            }
            if rec.mesh.is_empty() {
                log::warn!("the field has no zero crossing inside the domain; writing an empty mesh");
            }
            let start = Instant::now();
            write_mesh(&output, &rec.mesh).map_err(|e| NkfError::Stage { stage: "write", source: Box::new(e) })?;
            log::info!("{:<10} {:>9.3} s", "write", start.elapsed().as_secs_f64());
            log::info!("wrote {} vertices, {} triangles to {}", rec.mesh.vertices.len(), rec.mesh.triangles.len(), output.display());
            if let Some(gt) = gt {
                let report = MetricReport::compute(&rec.mesh, Some(&rec), &gt, DEFAULT_SAMPLES, seed)?;
                emit(metrics.as_deref(), &report.to_json())?;
            }
            Ok(())
        }
        RunConfig::Train { config, output, resume, metrics, log_every } => train(config, &output, resume.as_deref(), metrics.as_deref(), log_every),
        RunConfig::Eval { input, reference, output, seed, samples } => {
            let pred = read_mesh(&input)?;
            let gt = read_mesh(&reference)?;
            let report = MetricReport::compute(&pred, None, &gt, samples, seed)?;
            emit(output.as_deref(), &report.to_json())
        }
        RunConfig::BenchmarkDensity { output, options, kernel, sweep, shapes, reference } => {
            let options = nkf::ReconstructOptions { mode: kernel.load()?, ..options };
            let meshes = match reference {
                Some(path) => vec![normalize_mesh(&read_mesh(&path)?)?],
                None => held_out_shapes(shapes, sweep.seed, TrainConfig::default().mesh_resolution)?,
            };
            log::info!("sweeping {:?} points over {} shapes with the {} kernel", sweep.counts, meshes.len(), options.mode.name());
            let rows = benchmark_density(&meshes, &sweep, &options, |count, i, s| {
                log::info!("count {count} shape {i}: chamfer {:.6} iou {:.4}", s.chamfer, s.iou);
            })?;
            let mut csv = format!("{}\n", DensityRow::CSV_HEADER);
            for r in &rows {
                csv.push_str(&r.csv_row());
                csv.push('\n');
            }
            emit(output.as_deref(), csv.trim_end())
        }
    }
}

fn train(config: TrainConfig, output: &Path, resume: Option<&Path>, metrics: Option<&Path>, log_every: usize) -> Result<(), CliError> {
    let mut trainer = match resume {
        Some(path) => Trainer::resume(config, path)?,
        None => Trainer::new(config)?,
    };
    log::info!(
        "training {} parameters on {} shapes from step {} to {}",
        trainer.params().num_params(),
        trainer.shapes().len(),
        trainer.steps_done(),
        trainer.config().steps
    );
    let start = Instant::now();
    trainer.run(metrics, |m| {
        if (m.step + 1) % log_every == 0 {
            log::info!(
                "step {:>6} loss {:.5} bce {:.5} l1 {:.5} grad {:.3e} ({:.1} s)",
                m.step + 1,
                m.loss,
                m.bce,
                m.l1,
                m.grad_norm,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    trainer.save_checkpoint(output)?;
    log::info!("wrote checkpoint {}", output.display());
    Ok(())
}

/// Optional subsampling to `points` and Gaussian position noise.
fn perturb(cloud: &OrientedPointCloud, points: Option<usize>, noise: f64, seed: u64) -> Result<OrientedPointCloud, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = match points {
        Some(n) if n < cloud.len() => {
            let mut idx = sample(&mut rng, cloud.len(), n).into_vec();
            idx.sort_unstable();
            cloud.select(&idx)?
        }
        _ => cloud.clone(),
    };
    if noise > 0.0 {
        let dist = Normal::new(0.0, noise).map_err(|e| CliError::Usage(e.to_string()))?;
        let moved: Vec<Vec3> = out
            .points()
            .iter()
            .map(|p| p + Vec3::new(dist.sample(&mut rng), dist.sample(&mut rng), dist.sample(&mut rng)))
            .collect();
        out = OrientedPointCloud::new(moved, out.normals().to_vec())?;
    }
    Ok(out)
}

fn emit(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => {
            ensure_parent(p)?;
            std::fs::write(p, format!("{text}\n")).map_err(NkfError::at(p))?;
        }
        None => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{text}").map_err(NkfError::from)?;
        }
    }
    Ok(())
}

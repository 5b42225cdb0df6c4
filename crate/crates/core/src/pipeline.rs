//! End-to-end reconstruction: normalize, augment, optionally build the
//! learned feature field, solve, sample a grid, extract and denormalize.

use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NkfError, Result};
use crate::feature_field::{point_weights, FeatureFunction, FeatureNetworkParams};
use crate::geometry::{augment, default_epsilon, normalize_to_unit_cube, NormalizationTransform, OrientedPointCloud, Vec3};
use crate::krr::{FeatureSource, ImplicitField, NoFeatures};
use crate::mesh::TriangleMesh;
use crate::metrics::{iou, MetricReport, Occupancy, DEFAULT_SAMPLES};
use crate::surfacing::{default_domain, evaluate_grid, marching_cubes, ScalarGrid};
use crate::training::{derive_seed, procedural_shapes};

/// Point counts of the density sweep.
pub const DENSITY_COUNTS: [usize; 5] = [250, 500, 1000, 2000, 3000];

const HELD_OUT_STREAM: u64 = 21;
const SWEEP_STREAM: u64 = 22;

/// Which kernel conditions the solve.
#[derive(Debug, Clone)]
pub enum KernelMode {
    /// Plain Neural Spline kernel.
    Fixed,
    /// Plain kernel with caller-given weights, one per input point.
    Weighted(Arc<Vec<f64>>),
    Learned(Arc<FeatureNetworkParams>),
    /// Learned kernel plus per-point weights from the weight head.
    LearnedWeighted(Arc<FeatureNetworkParams>),
}

impl KernelMode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Fixed => "fixed",
            Self::Weighted(_) => "weighted",
            Self::Learned(_) => "learned",
            Self::LearnedWeighted(_) => "learned-weighted",
        }
    }

    fn params(&self) -> Option<&FeatureNetworkParams> {
        match self {
            Self::Fixed | Self::Weighted(_) => None,
            Self::Learned(p) | Self::LearnedWeighted(p) => Some(p),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReconstructOptions {
    /// Offset along the normals in normalized units; defaults to 1% of the
    /// normalized bounding-box diagonal.
    pub epsilon: Option<f64>,
    pub lambda: f64,
    /// Marching-cubes grid resolution over the normalized domain.
    pub resolution: usize,
    pub mode: KernelMode,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        Self { epsilon: None, lambda: 0.0, resolution: 64, mode: KernelMode::Fixed }
    }
}

impl ReconstructOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(NkfError::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if let Some(e) = self.epsilon {
            if !(e > 0.0) || !e.is_finite() {
                return Err(NkfError::InvalidEpsilon(e));
            }
        }
        if self.resolution < 2 {
            return Err(NkfError::Config(format!("grid resolution must be at least 2, got {}", self.resolution)));
        }
        if matches!(self.mode, KernelMode::LearnedWeighted(_) | KernelMode::Weighted(_)) && self.lambda <= 0.0 {
            return Err(NkfError::WeightedNeedsRegularization);
        }
        Ok(())
    }
}

/// Wall time of one pipeline stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTiming {
    pub stage: &'static str,
    pub seconds: f64,
}

/// A solved field together with the frame it was solved in.
#[derive(Debug, Clone)]
pub struct FittedField {
    /// Field over the normalized frame.
    pub field: ImplicitField,
    pub transform: NormalizationTransform,
    pub epsilon: f64,
}

impl FittedField {
    /// Field values at input-frame positions.
    pub fn evaluate(&self, points: &[Vec3]) -> Vec<f64> {
        let local: Vec<Vec3> = points.iter().map(|p| self.transform.apply(p)).collect();
        self.field.evaluate(&local)
    }
}

impl Occupancy for FittedField {
    fn inside(&self, points: &[Vec3]) -> Result<Vec<bool>> {
        Ok(self.evaluate(points).into_iter().map(|f| f < 0.0).collect())
    }
}

/// A reconstructed surface with the field that produced it.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub fitted: FittedField,
    /// Surface in the input frame.
    pub mesh: TriangleMesh,
    /// Field samples over the normalized domain.
    pub grid: ScalarGrid,
    pub timings: Vec<StageTiming>,
}

impl Reconstruction {
    pub fn evaluate(&self, points: &[Vec3]) -> Vec<f64> {
        self.fitted.evaluate(points)
    }
}

impl Occupancy for Reconstruction {
    fn inside(&self, points: &[Vec3]) -> Result<Vec<bool>> {
        self.fitted.inside(points)
    }
}

struct Stages {
    timings: Vec<StageTiming>,
}

impl Stages {
    fn run<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| NkfError::Stage { stage, source: Box::new(e) })?;
        let seconds = start.elapsed().as_secs_f64();
        log::debug!("{stage}: {seconds:.3}s");
        self.timings.push(StageTiming { stage, seconds });
        Ok(out)
    }
}

/// Normalizes, augments and solves without surfacing.
pub fn fit_field(cloud: &OrientedPointCloud, options: &ReconstructOptions) -> Result<FittedField> {
    fit_staged(cloud, options, &mut Stages { timings: Vec::new() })
}

fn fit_staged(cloud: &OrientedPointCloud, options: &ReconstructOptions, stages: &mut Stages) -> Result<FittedField> {
    options.validate()?;
    let (local, transform) = stages.run("normalize", || normalize_to_unit_cube(cloud))?;
    let epsilon = options.epsilon.unwrap_or_else(|| default_epsilon(&local));
    let augmented = stages.run("augment", || augment(&local, epsilon))?;

    let features: Arc<dyn FeatureSource> = match options.mode.params() {
        Some(params) => Arc::new(stages.run("features", || FeatureFunction::build(&local, params))?),
        None => Arc::new(NoFeatures),
    };
    let weights = match &options.mode {
        KernelMode::LearnedWeighted(params) => Some(stages.run("weights", || {
            let f: Vec<Vec<f64>> = local.points().iter().map(|p| features.feature(p)).collect();
            let w = point_weights(&f, params)?;
            Ok([w.as_slice(), w.as_slice()].concat())
        })?),
        KernelMode::Weighted(w) => {
            if w.len() != local.len() {
                return Err(NkfError::DimensionMismatch { expected: local.len(), actual: w.len() });
            }
            Some([w.as_slice(), w.as_slice()].concat())
        }
        _ => None,
    };
    let field = stages.run("solve", || ImplicitField::fit(&augmented, features.clone(), options.lambda, weights.as_deref()))?;
    Ok(FittedField { field, transform, epsilon })
}

/// Reconstructs a watertight surface from an oriented cloud.
pub fn reconstruct(cloud: &OrientedPointCloud, options: &ReconstructOptions) -> Result<Reconstruction> {
    let mut stages = Stages { timings: Vec::new() };
    let fitted = fit_staged(cloud, options, &mut stages)?;
    let grid = stages.run("evaluate", || evaluate_grid(&fitted.field, options.resolution, default_domain()))?;
    let mesh = stages.run("surface", || {
        let m = marching_cubes(&grid, 0.0)?;
        Ok(m.map_vertices(|p| fitted.transform.invert(p)))
    })?;
    Ok(Reconstruction { fitted, mesh, grid, timings: stages.timings })
}

/// Centers a mesh and scales its longest side to 1.
pub fn normalize_mesh(mesh: &TriangleMesh) -> Result<TriangleMesh> {
    if mesh.is_empty() {
        return Err(NkfError::NothingToSample);
    }
    let (lo, hi) = mesh.bounds();
    let extent = (hi - lo).max();
    if !(extent > 0.0) {
        return Err(NkfError::ZeroExtent);
    }
    let t = NormalizationTransform { scale: 1.0 / extent, offset: (lo + hi) * 0.5 };
    Ok(mesh.map_vertices(|p| t.apply(p)))
}

/// Normalized procedural shapes disjoint from the training set of the same
/// seed.
pub fn held_out_shapes(count: usize, seed: u64, mesh_resolution: usize) -> Result<Vec<TriangleMesh>> {
    procedural_shapes(count, derive_seed(seed, HELD_OUT_STREAM, 0))
        .iter()
        .map(|s| normalize_mesh(&s.mesh(mesh_resolution)?))
        .collect()
}

/// Metrics of one reconstruction against its ground truth. An empty
/// reconstruction has infinite Chamfer distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeScore {
    pub chamfer: f64,
    pub iou: f64,
}

pub fn score(rec: &Reconstruction, gt: &TriangleMesh, samples: usize, seed: u64) -> Result<ShapeScore> {
    if rec.mesh.is_empty() {
        let (lo, hi) = gt.bounds();
        let domain = crate::geometry::Aabb::new(lo, hi).padded(0.05);
        return Ok(ShapeScore { chamfer: f64::INFINITY, iou: iou(rec, gt, &domain, samples, seed.wrapping_add(2))? });
    }
    let r = MetricReport::compute(&rec.mesh, Some(rec), gt, samples, seed)?;
    Ok(ShapeScore { chamfer: r.chamfer_l2, iou: r.iou })
}

/// Mean metrics at one input density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityRow {
    pub count: usize,
    pub chamfer: f64,
    pub iou: f64,
}

impl DensityRow {
    pub const CSV_HEADER: &'static str = "count,chamfer,iou";

    pub fn csv_row(&self) -> String {
        format!("{},{:.9e},{:.6}", self.count, self.chamfer, self.iou)
    }
}

#[derive(Debug, Clone)]
pub struct DensitySweep {
    pub counts: Vec<usize>,
    /// Gaussian noise added to the sampled input points.
    pub noise: f64,
    pub seed: u64,
    /// Samples per metric estimate.
    pub metric_samples: usize,
}

impl Default for DensitySweep {
    fn default() -> Self {
        Self { counts: DENSITY_COUNTS.to_vec(), noise: 0.0, seed: 0, metric_samples: DEFAULT_SAMPLES }
    }
}

/// Reconstructs every shape from clouds of each count and averages the
/// metrics per count.
pub fn benchmark_density(
    shapes: &[TriangleMesh],
    sweep: &DensitySweep,
    options: &ReconstructOptions,
    mut progress: impl FnMut(usize, usize, &ShapeScore),
) -> Result<Vec<DensityRow>> {
    options.validate()?;
    if shapes.is_empty() {
        return Err(NkfError::Config("density sweep needs at least one shape".into()));
    }
    let mut rows = Vec::with_capacity(sweep.counts.len());
    for &count in &sweep.counts {
        let (mut chamfer, mut inter) = (0.0, 0.0);
        for (i, gt) in shapes.iter().enumerate() {
            let seed = derive_seed(sweep.seed, SWEEP_STREAM, i as u64);
            let cloud = sample_cloud(gt, count, sweep.noise, seed)?;
            let rec = reconstruct(&cloud, options)?;
            let s = score(&rec, gt, sweep.metric_samples, seed)?;
            progress(count, i, &s);
            chamfer += s.chamfer;
            inter += s.iou;
        }
        let n = shapes.len() as f64;
        rows.push(DensityRow { count, chamfer: chamfer / n, iou: inter / n });
    }
    Ok(rows)
}

/// Area-uniform oriented samples of a mesh with optional Gaussian noise on
/// the positions.
pub fn sample_cloud(mesh: &TriangleMesh, n: usize, noise: f64, seed: u64) -> Result<OrientedPointCloud> {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut points, normals) = mesh.sample_surface(n, &mut rng)?;
    if noise > 0.0 {
        let dist = Normal::new(0.0, noise).map_err(|e| NkfError::Config(e.to_string()))?;
        for p in &mut points {
            *p += Vec3::new(dist.sample(&mut rng), dist.sample(&mut rng), dist.sample(&mut rng));
        }
    }
    OrientedPointCloud::new(points, normals)
}

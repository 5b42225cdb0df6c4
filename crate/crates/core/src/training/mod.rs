//! Desk-scale training of the feature network: procedural shapes,
//! supervision sampling, the occupancy + surface loss, and an Adam loop
//! with resumable checkpoints.

mod shapes;

pub use shapes::{Primitive, ProceduralShape, ShapeKind};

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{NkfError, Result};
use crate::feature_field::{
    CellAssignment, FeatureNetConfig, FeatureNetworkParams, GridInput, NetworkVars, Segment, OPTIMIZER_PREFIX,
};
use crate::geometry::{
    augment, default_epsilon, normalize_to_unit_cube, Aabb, NormalizationTransform, OrientedPointCloud,
    SupervisionSample, Vec3,
};
use crate::krr::ImplicitField;
use crate::mesh::{occupancy_labels, TriangleMesh};
use crate::metrics::uniform_points;

/// Hyperparameters of a training run. Every field has a default and can be
/// set from a `key = value` file with the same names.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Shapes per step.
    pub batch_size: usize,
    pub steps: usize,
    /// Ridge regularizer of the solve.
    pub lambda: f64,
    /// Weight of the surface term; defaults to the logit scale.
    pub lambda_l1: Option<f64>,
    /// Augmentation offset; defaults to 1% of the normalized input diagonal.
    pub epsilon: Option<f64>,
    /// Feature grid resolution `M`.
    pub resolution: usize,
    /// Feature channels `d`.
    pub channels: usize,
    /// Backbone widths; defaults to `d, 2d, 4d`.
    pub widths: Option<[usize; 3]>,
    /// Field-to-logit scale `s`; defaults to `1/ε`.
    pub logit_scale: Option<f64>,
    pub seed: u64,
    /// Std of Gaussian noise added to input points, in normalized units.
    pub noise: f64,
    /// Number of procedural training shapes.
    pub shapes: usize,
    /// Input samples per shape per step.
    pub input_points: usize,
    /// Volume and surface supervision points drawn per shape per step.
    pub volume_points: usize,
    pub surface_points: usize,
    /// Supervision pool sizes, drawn once per shape.
    pub pool_volume: usize,
    pub pool_surface: usize,
    /// Marching-cubes resolution of the ground-truth meshes.
    pub mesh_resolution: usize,
    /// Learn per-point weights and solve the weighted system.
    pub weighted: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 1,
            steps: 1000,
            lambda: 0.0,
            lambda_l1: None,
            epsilon: None,
            resolution: 32,
            channels: 32,
            widths: None,
            logit_scale: None,
            seed: 0,
            noise: 0.0,
            shapes: 200,
            input_points: 100,
            volume_points: 1024,
            surface_points: 256,
            pool_volume: 20_000,
            pool_surface: 5_000,
            mesh_resolution: 64,
            weighted: false,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| NkfError::Config(format!("{key} = {v:?}: {e}")))
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are
    /// errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| NkfError::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
            c.set(key.trim(), value.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(NkfError::at(path))?)
    }

    /// Sets one field by name.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "learning_rate" | "lr" => self.learning_rate = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "steps" => self.steps = parse_value(key, v)?,
            "lambda" => self.lambda = parse_value(key, v)?,
            "lambda_l1" => self.lambda_l1 = Some(parse_value(key, v)?),
            "epsilon" => self.epsilon = Some(parse_value(key, v)?),
            "resolution" | "M" => self.resolution = parse_value(key, v)?,
            "channels" | "d" => self.channels = parse_value(key, v)?,
            "widths" => {
                let w: Vec<usize> = v.split(',').map(|t| parse_value(key, t.trim())).collect::<Result<_>>()?;
                let w: [usize; 3] =
                    w.try_into().map_err(|_| NkfError::Config(format!("widths needs three values, got {v:?}")))?;
                self.widths = Some(w);
            }
            "logit_scale" => self.logit_scale = Some(parse_value(key, v)?),
            "seed" => self.seed = parse_value(key, v)?,
            "noise" => self.noise = parse_value(key, v)?,
            "shapes" => self.shapes = parse_value(key, v)?,
            "input_points" => self.input_points = parse_value(key, v)?,
            "volume_points" => self.volume_points = parse_value(key, v)?,
            "surface_points" => self.surface_points = parse_value(key, v)?,
            "pool_volume" => self.pool_volume = parse_value(key, v)?,
            "pool_surface" => self.pool_surface = parse_value(key, v)?,
            "mesh_resolution" => self.mesh_resolution = parse_value(key, v)?,
            "weighted" => self.weighted = parse_value(key, v)?,
            _ => return Err(NkfError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NkfError::Config(m.to_string()));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be finite and non-negative");
        }
        if self.weighted && self.lambda <= 0.0 {
            return bad("weighted training needs lambda > 0");
        }
        for (name, v) in [("lambda_l1", self.lambda_l1), ("epsilon", self.epsilon), ("logit_scale", self.logit_scale)] {
            if let Some(v) = v {
                if !(v >= 0.0) || !v.is_finite() || (name != "lambda_l1" && v == 0.0) {
                    return Err(NkfError::Config(format!("{name} must be positive and finite, got {v}")));
                }
            }
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad("noise must be finite and non-negative");
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("shapes", self.shapes),
            ("input_points", self.input_points),
            ("volume_points", self.volume_points),
            ("surface_points", self.surface_points),
            ("pool_volume", self.pool_volume),
            ("pool_surface", self.pool_surface),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(NkfError::Config(format!("{name} must be positive")));
        }
        if self.mesh_resolution < 8 {
            return bad("mesh_resolution must be at least 8");
        }
        self.network().validate()
    }

    pub fn network(&self) -> FeatureNetConfig {
        let mut c = FeatureNetConfig::new(self.resolution, self.channels);
        if let Some(w) = self.widths {
            c.widths = w;
        }
        c
    }
}

/// Loss hyperparameters for one shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub lambda: f64,
    pub epsilon: f64,
    pub logit_scale: f64,
    pub lambda_l1: f64,
    pub weighted: bool,
}

impl LossSettings {
    /// Resolves the defaults of `config` against a normalized input cloud.
    pub fn resolve(config: &TrainConfig, cloud: &OrientedPointCloud) -> Self {
        let epsilon = config.epsilon.unwrap_or_else(|| default_epsilon(cloud));
        let logit_scale = config.logit_scale.unwrap_or(1.0 / epsilon);
        Self {
            lambda: config.lambda,
            epsilon,
            logit_scale,
            lambda_l1: config.lambda_l1.unwrap_or(logit_scale),
            weighted: config.weighted,
        }
    }
}

/// Scalar loss nodes recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub loss: Var,
    pub bce: Var,
    pub l1: Var,
    /// The matrix handed to the solve, kept for diagnostics.
    pub system: Var,
}

/// `mean BCE(σ(-s f_vol), occupancy) + λ_L1 mean |f_surf|` from field values
/// already on the tape.
pub fn occupancy_loss(
    tape: &mut Tape,
    f_volume: Var,
    occupancy: &[f64],
    f_surface: Var,
    logit_scale: f64,
    lambda_l1: f64,
) -> Result<(Var, Var, Var)> {
    if occupancy.is_empty() || tape.value(f_surface).is_empty() {
        return Err(NkfError::InvalidInput("loss needs non-empty volume and surface pools".into()));
    }
    let logits = tape.scale(f_volume, -logit_scale);
    let bce = tape.bce_with_logits(logits, occupancy)?;
    let a = tape.abs(f_surface);
    let l1 = tape.mean(a);
    let weighted = tape.scale(l1, lambda_l1);
    let loss = tape.add(bce, weighted)?;
    Ok((loss, bce, l1))
}

/// Records the full differentiable path for one shape: encode the input,
/// run the backbone, look up features at the kernel centers and queries,
/// solve for the coefficients and score the resulting field.
pub fn shape_loss(
    tape: &mut Tape,
    vars: &NetworkVars,
    config: &FeatureNetConfig,
    cloud: &OrientedPointCloud,
    supervision: &SupervisionSample,
    settings: &LossSettings,
) -> Result<LossTerms> {
    let s = cloud.len();
    let (nv, ns) = (supervision.volume_points.len(), supervision.surface_points.len());
    let assignment = CellAssignment::new(cloud.points(), cloud.normals(), config.resolution, config.use_normals)?;
    let rows = vars.encode(tape, &assignment)?;
    let trunk = vars.trunk(tape, GridInput::Sparse { rows, cells: assignment.occupied_cells() })?;

    let aug = augment(cloud, settings.epsilon)?;
    let mut points = aug.points.clone();
    if settings.weighted {
        points.extend_from_slice(cloud.points());
    }
    let query_start = points.len();
    points.extend_from_slice(&supervision.volume_points);
    points.extend_from_slice(&supervision.surface_points);

    let features = vars.features_at(tape, trunk, &points)?;
    let positions: Vec<f64> = points.iter().flat_map(|p| p.iter().copied()).collect();
    let positions = tape.constant(Tensor::from_parts(vec![points.len(), 3], positions));
    let lifted = tape.concat_cols(positions, features)?;
    let centers = tape.slice_rows(lifted, 0, 2 * s)?;
    let queries = tape.slice_rows(lifted, query_start, points.len())?;
    let gram = tape.kernel_matrix(centers, centers)?;
    let cross = tape.kernel_matrix(queries, centers)?;
    let labels = tape.constant(Tensor::vector(aug.labels.clone()));

    let (system, rhs) = if settings.weighted {
        let f_in = tape.slice_rows(features, 2 * s, 3 * s)?;
        let w = vars.point_weights(tape, f_in)?;
        let w2 = tape.concat_rows(w, w)?;
        let system = tape.diag_sandwich(gram, w2)?;
        let rhs = tape.mul(w2, labels)?;
        (system, rhs)
    } else {
        (gram, labels)
    };
    let (alpha, _) = tape.solve(system, rhs, settings.lambda)?;
    let f = tape.matmul(cross, alpha)?;
    let f_volume = tape.slice_rows(f, 0, nv)?;
    let f_surface = tape.slice_rows(f, nv, nv + ns)?;
    let occupancy: Vec<f64> = supervision.occupancy.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let (loss, bce, l1) =
        occupancy_loss(tape, f_volume, &occupancy, f_surface, settings.logit_scale, settings.lambda_l1)?;
    Ok(LossTerms { loss, bce, l1, system })
}

/// Loss values of a solved field without a tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub bce: f64,
    pub l1: f64,
}

/// Same loss as [`occupancy_loss`] for an already solved field.
pub fn evaluate_loss(
    field: &ImplicitField,
    supervision: &SupervisionSample,
    logit_scale: f64,
    lambda_l1: f64,
) -> Result<LossValue> {
    let mut tape = Tape::new();
    let fv = tape.constant(Tensor::vector(field.evaluate(&supervision.volume_points)));
    let fs = tape.constant(Tensor::vector(field.evaluate(&supervision.surface_points)));
    let occ: Vec<f64> = supervision.occupancy.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let (loss, bce, l1) = occupancy_loss(&mut tape, fv, &occ, fs, logit_scale, lambda_l1)?;
    let v = |x: Var| tape.value(x).data()[0];
    Ok(LossValue { loss: v(loss), bce: v(bce), l1: v(l1) })
}

/// `n_vol` uniform points in `domain` labelled against the mesh, plus
/// `n_surf` area-weighted surface samples.
pub fn sample_supervision(
    mesh: &TriangleMesh,
    domain: &Aabb,
    n_vol: usize,
    n_surf: usize,
    seed: u64,
) -> Result<SupervisionSample> {
    let volume_points = uniform_points(domain, n_vol, derive_seed(seed, 1, 0));
    let occupancy = occupancy_labels(&volume_points, mesh)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2, 0));
    let (surface_points, _) = mesh.sample_surface(n_surf, &mut rng)?;
    Ok(SupervisionSample { volume_points, occupancy, surface_points })
}

/// Splits one seed into independent streams.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a combination of the inputs
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHAPE_STREAM: u64 = 11;
const POOL_STREAM: u64 = 12;
const STEP_STREAM: u64 = 13;
const INIT_STREAM: u64 = 14;

/// The `count` procedural shapes of a seed, cycling through the shape kinds.
pub fn procedural_shapes(count: usize, seed: u64) -> Vec<ProceduralShape> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SHAPE_STREAM, i as u64));
            ProceduralShape::random(ShapeKind::ALL[i % ShapeKind::ALL.len()], &mut rng)
        })
        .collect()
}

/// A ground-truth shape with its cached supervision pools. The mesh is in
/// normalized coordinates: centered, longest side 1.
#[derive(Debug, Clone)]
pub struct TrainingShape {
    pub mesh: TriangleMesh,
    pub pool: SupervisionSample,
    pub seed: u64,
}

impl TrainingShape {
    pub fn new(mesh: TriangleMesh, pool_volume: usize, pool_surface: usize, seed: u64) -> Result<Self> {
        let (lo, hi) = mesh.bounds();
        let extent = (hi - lo).max();
        if !(extent > 0.0) {
            return Err(NkfError::ZeroExtent);
        }
        let t = NormalizationTransform { scale: 1.0 / extent, offset: (lo + hi) * 0.5 };
        let mesh = mesh.map_vertices(|p| t.apply(p));
        let pool = sample_supervision(&mesh, &Aabb::centered_cube(0.5), pool_volume, pool_surface, seed)?;
        Ok(Self { mesh, pool, seed })
    }

    /// Draws a (possibly noisy) input cloud with face normals.
    pub fn sample_input<R: Rng>(&self, n: usize, noise: f64, rng: &mut R) -> Result<OrientedPointCloud> {
        let (mut points, normals) = self.mesh.sample_surface(n, rng)?;
        if noise > 0.0 {
            let dist = Normal::new(0.0, noise).map_err(|e| NkfError::Config(e.to_string()))?;
            for p in &mut points {
                *p += Vec3::new(dist.sample(rng), dist.sample(rng), dist.sample(rng));
            }
        }
        OrientedPointCloud::new(points, normals)
    }

    /// Random subset of the pools mapped through `t`.
    fn draw_supervision<R: Rng>(&self, n_vol: usize, n_surf: usize, t: &NormalizationTransform, rng: &mut R) -> SupervisionSample {
        let mut sample = SupervisionSample { volume_points: Vec::new(), occupancy: Vec::new(), surface_points: Vec::new() };
        for i in rand::seq::index::sample(rng, self.pool.volume_points.len(), n_vol.min(self.pool.volume_points.len())) {
            sample.volume_points.push(t.apply(&self.pool.volume_points[i]));
            sample.occupancy.push(self.pool.occupancy[i]);
        }
        for i in rand::seq::index::sample(rng, self.pool.surface_points.len(), n_surf.min(self.pool.surface_points.len())) {
            sample.surface_points.push(t.apply(&self.pool.surface_points[i]));
        }
        sample
    }
}

/// Builds the training set of a config.
pub fn training_set(config: &TrainConfig) -> Result<Vec<TrainingShape>> {
    procedural_shapes(config.shapes, config.seed)
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mesh = s.mesh(config.mesh_resolution)?;
            TrainingShape::new(mesh, config.pool_volume, config.pool_surface, derive_seed(config.seed, POOL_STREAM, i as u64))
        })
        .collect()
}

/// Adam moments over the flattened parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }

    fn segments(&self) -> Vec<Segment> {
        let seg = |name: &str, data: Vec<f64>| Segment { name: format!("{OPTIMIZER_PREFIX}{name}"), shape: vec![data.len()], data };
        vec![seg("m", self.m.clone()), seg("v", self.v.clone()), seg("t", vec![self.t as f64])]
    }

    fn from_segments(segments: &[Segment], n: usize) -> Result<Self> {
        let find = |name: &str| {
            segments
                .iter()
                .find(|s| s.name == format!("{OPTIMIZER_PREFIX}{name}"))
                .ok_or_else(|| NkfError::InvalidInput(format!("checkpoint lacks optimizer state {name}")))
        };
        let (m, v, t) = (find("m")?, find("v")?, find("t")?);
        if m.data.len() != n || v.data.len() != n || t.data.len() != 1 {
            return Err(NkfError::InvalidInput("optimizer state does not match the parameters".into()));
        }
        Ok(Self { m: m.data.clone(), v: v.data.clone(), t: t.data[0] as u64, ..Self::new(n) })
    }
}

/// Per-step training record, one CSV row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub bce: f64,
    pub l1: f64,
    pub grad_norm: f64,
}

pub const CSV_HEADER: &str = "step,loss,bce,l1,grad_norm";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{:.10e},{:.10e},{:.10e},{:.10e}", self.step, self.loss, self.bce, self.l1, self.grad_norm)
    }
}

/// Loss and flattened parameter gradient for one shape.
pub fn shape_gradient(
    params: &FeatureNetworkParams,
    cloud: &OrientedPointCloud,
    supervision: &SupervisionSample,
    settings: &LossSettings,
) -> Result<(LossValue, Vec<f64>)> {
    let mut tape = Tape::new();
    let vars = params.attach(&mut tape, true);
    let terms = shape_loss(&mut tape, &vars, params.config(), cloud, supervision, settings)?;
    let v = |x: Var| tape.value(x).data()[0];
    let value = LossValue { loss: v(terms.loss), bce: v(terms.bce), l1: v(terms.l1) };
    if !value.loss.is_finite() {
        return Err(non_finite_report(&tape, terms.system, settings, value));
    }
    let grads = tape.backward(terms.loss)?;
    let mut flat = Vec::with_capacity(params.num_params());
    for ((_, var), seg) in vars.vars().zip(params.segments()) {
        flat.extend(grads.get_or_zero(var, seg.data.len()));
    }
    if let Some(i) = flat.iter().position(|g| !g.is_finite()) {
        return Err(NkfError::NonFinite(format!("gradient entry {i} (lambda {:e})", settings.lambda)));
    }
    Ok((value, flat))
}

fn non_finite_report(tape: &Tape, system: Var, settings: &LossSettings, value: LossValue) -> NkfError {
    let g = tape.value(system);
    let n = g.rows();
    let m = DMatrix::from_row_slice(n, n, g.data());
    let cond = if m.iter().all(|v| v.is_finite()) {
        let eig = nalgebra::SymmetricEigen::new(m).eigenvalues;
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), e| (lo.min(e.abs()), hi.max(e.abs())));
        format!("{:e}", (hi + settings.lambda) / (lo + settings.lambda))
    } else {
        "undefined (non-finite Gram entries)".to_string()
    };
    NkfError::NonFinite(format!(
        "training loss {} (bce {}, l1 {}); lambda {:e}, epsilon {:e}, Gram condition estimate {cond}",
        value.loss, value.bce, value.l1, settings.lambda, settings.epsilon
    ))
}

/// One optimizer update over a batch of shapes. Gradients are averaged in
/// batch order.
pub fn train_step(
    params: &mut FeatureNetworkParams,
    adam: &mut Adam,
    batch: &[&TrainingShape],
    config: &TrainConfig,
    step: usize,
) -> Result<StepMetrics> {
    let n = params.num_params();
    let mut grad = vec![0.0; n];
    let mut totals = LossValue { loss: 0.0, bce: 0.0, l1: 0.0 };
    for (slot, shape) in batch.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STEP_STREAM, (step * batch.len() + slot) as u64));
        let raw = shape.sample_input(config.input_points, config.noise, &mut rng)?;
        let (cloud, t) = normalize_to_unit_cube(&raw)?;
        let supervision = shape.draw_supervision(config.volume_points, config.surface_points, &t, &mut rng);
        let settings = LossSettings::resolve(config, &cloud);
        let (value, g) = shape_gradient(params, &cloud, &supervision, &settings).map_err(|e| match e {
            NkfError::NonFinite(msg) => NkfError::NonFinite(format!("step {step}, shape seed {}: {msg}", shape.seed)),
            e => e,
        })?;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        totals.loss += value.loss;
        totals.bce += value.bce;
        totals.l1 += value.l1;
    }
    let k = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= k);
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let mut flat = params.to_flat();
    adam.update(&mut flat, &grad, config.learning_rate);
    params.set_flat(&flat)?;
    Ok(StepMetrics { step, loss: totals.loss / k, bce: totals.bce / k, l1: totals.l1 / k, grad_norm })
}

/// A training run: data, parameters, optimizer state and the step counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    params: FeatureNetworkParams,
    adam: Adam,
    shapes: Vec<TrainingShape>,
    step: usize,
}

impl Trainer {
    /// Fresh run: builds the dataset and initializes the network from the seed.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, INIT_STREAM, 0));
        let params = FeatureNetworkParams::init(config.network(), &mut rng)?;
        let shapes = training_set(&config)?;
        Ok(Self::with_parts(config, params, shapes))
    }

    /// Run over caller-provided shapes and parameters.
    pub fn with_parts(config: TrainConfig, params: FeatureNetworkParams, shapes: Vec<TrainingShape>) -> Self {
        let adam = Adam::new(params.num_params());
        Self { config, params, adam, shapes, step: 0 }
    }

    /// Continues a run from a checkpoint written by [`save_checkpoint`](Self::save_checkpoint).
    pub fn resume(config: TrainConfig, checkpoint: &Path) -> Result<Self> {
        config.validate()?;
        let (params, extra) = FeatureNetworkParams::load_with(checkpoint)?;
        if *params.config() != config.network() {
            return Err(NkfError::Config(format!(
                "checkpoint network {:?} does not match the config {:?}",
                params.config(),
                config.network()
            )));
        }
        let adam = Adam::from_segments(&extra, params.num_params())?;
        let shapes = training_set(&config)?;
        let step = adam.t as usize;
        Ok(Self { config, params, adam, shapes, step })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &FeatureNetworkParams {
        &self.params
    }

    pub fn shapes(&self) -> &[TrainingShape] {
        &self.shapes
    }

    /// Number of completed steps.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Shapes used by a step, drawn without replacement within the step.
    fn batch_indices(&self, step: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, STEP_STREAM + 100, step as u64));
        let k = self.config.batch_size.min(self.shapes.len());
        rand::seq::index::sample(&mut rng, self.shapes.len(), k).into_vec()
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let idx = self.batch_indices(self.step);
        let batch: Vec<&TrainingShape> = idx.iter().map(|&i| &self.shapes[i]).collect();
        let m = train_step(&mut self.params, &mut self.adam, &batch, &self.config, self.step)?;
        self.step += 1;
        Ok(m)
    }

    /// Runs until `config.steps` steps are done, appending one CSV row per
    /// step when `csv` is given (the header is written if the file is new).
    pub fn run(&mut self, csv: Option<&Path>, mut progress: impl FnMut(&StepMetrics)) -> Result<Vec<StepMetrics>> {
        let mut out = match csv {
            Some(path) => {
                let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
                crate::io::ensure_parent(path)?;
                let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(NkfError::at(path))?;
                if fresh {
                    writeln!(f, "{CSV_HEADER}")?;
                }
                Some(f)
            }
            None => None,
        };
        let mut history = Vec::new();
        while self.step < self.config.steps {
            let m = self.step()?;
            if let Some(f) = out.as_mut() {
                writeln!(f, "{}", m.csv_row())?;
            }
            progress(&m);
            history.push(m);
        }
        Ok(history)
    }

    /// Parameters plus optimizer state in the checkpoint format.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.params.save_with(path, &self.adam.segments())
    }
}

#[cfg(test)]
mod tests;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check;
use crate::krr::NoFeatures;
use crate::mesh::tests::geodesic_sphere;
use std::sync::Arc;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        steps: 4,
        resolution: 8,
        channels: 4,
        widths: Some([2, 4, 4]),
        shapes: 3,
        input_points: 40,
        volume_points: 128,
        surface_points: 32,
        pool_volume: 2000,
        pool_surface: 500,
        mesh_resolution: 24,
        seed: 7,
        ..TrainConfig::default()
    }
}

fn sphere_shape(seed: u64) -> TrainingShape {
    TrainingShape::new(geodesic_sphere(0.4, 3), 4000, 1000, seed).unwrap()
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

#[test]
fn config_parsing() {
    let c = TrainConfig::parse("# comment\nsteps = 12\nlr=0.01\nwidths = 4, 8, 16\nlambda_l1 = 0.5 # trailing\nweighted = true\nlambda = 1e-3\n").unwrap();
    assert_eq!(c.steps, 12);
    assert_eq!(c.learning_rate, 0.01);
    assert_eq!(c.widths, Some([4, 8, 16]));
    assert_eq!(c.lambda_l1, Some(0.5));
    assert!(c.weighted);
    assert!(matches!(TrainConfig::parse("bogus = 1"), Err(NkfError::Config(_))));
    assert!(matches!(TrainConfig::parse("steps 3"), Err(NkfError::Config(_))));
    assert!(matches!(TrainConfig::parse("steps = -3"), Err(NkfError::Config(_))));
    assert!(TrainConfig::parse("resolution = 30").is_err());
    assert!(TrainConfig::parse("weighted = true").is_err(), "weighted needs lambda > 0");
}

#[test]
fn zero_field_loss_is_log_two() {
    let mut tape = Tape::new();
    let fv = tape.constant(Tensor::vector(vec![0.0; 10]));
    let fs = tape.constant(Tensor::vector(vec![0.0; 4]));
    let occ: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
    let (loss, bce, l1) = occupancy_loss(&mut tape, fv, &occ, fs, 50.0, 3.0).unwrap();
    assert!((scalar(&tape, bce) - std::f64::consts::LN_2).abs() < 1e-15);
    assert_eq!(scalar(&tape, l1), 0.0);
    assert_eq!(scalar(&tape, loss), scalar(&tape, bce));
}

#[test]
fn separated_field_saturates_the_loss() {
    let s = 40.0;
    let occ = [1.0, 1.0, 0.0, 0.0, 1.0];
    let f: Vec<f64> = occ.iter().map(|&o| if o == 1.0 { -10.0 / s } else { 10.0 / s }).collect();
    let mut tape = Tape::new();
    let fv = tape.constant(Tensor::vector(f));
    let fs = tape.constant(Tensor::vector(vec![0.0]));
    let (_, bce, _) = occupancy_loss(&mut tape, fv, &occ, fs, s, 1.0).unwrap();
    assert!(scalar(&tape, bce) <= 1e-4);
}

#[test]
fn loss_without_surface_term_matches_bce_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f: Vec<f64> = (0..50).map(|_| rng.gen_range(-0.05..0.05)).collect();
    let occ: Vec<f64> = (0..50).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
    let s = 60.0;
    let mut tape = Tape::new();
    let fv = tape.constant(Tensor::vector(f.clone()));
    let fs = tape.constant(Tensor::vector(vec![0.3, -0.2]));
    let (loss, _, _) = occupancy_loss(&mut tape, fv, &occ, fs, s, 0.0).unwrap();
    let oracle = f
        .iter()
        .zip(&occ)
        .map(|(f, y)| {
            let p = 1.0 / (1.0 + (s * f).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / 50.0;
    assert!((scalar(&tape, loss) - oracle).abs() <= 1e-10);
}

#[test]
fn empty_pools_are_rejected() {
    let mut tape = Tape::new();
    let fv = tape.constant(Tensor::vector(vec![]));
    let fs = tape.constant(Tensor::vector(vec![0.0]));
    assert!(occupancy_loss(&mut tape, fv, &[], fs, 1.0, 1.0).is_err());
}

#[test]
fn supervision_sampling() {
    let ball = geodesic_sphere(1.0, 4);
    let dom = Aabb::centered_cube(1.0);
    let s = sample_supervision(&ball, &dom, 10_000, 500, 3).unwrap();
    let inside = s.occupancy.iter().filter(|&&b| b).count() as f64 / 1e4;
    assert!((inside - std::f64::consts::PI / 6.0).abs() <= 0.05, "{inside}");
    // chord sag of the level-4 geodesic sphere is well below 1e-2
    for p in &s.surface_points {
        assert!((p.norm() - 1.0).abs() <= 1e-2);
    }
    assert_eq!(s, sample_supervision(&ball, &dom, 10_000, 500, 3).unwrap());
    let open = TriangleMesh::new(ball.vertices.clone(), ball.triangles[1..].to_vec()).unwrap();
    assert!(matches!(sample_supervision(&open, &dom, 10, 10, 3), Err(NkfError::OpenSurface(_))));
}

#[test]
fn evaluate_loss_of_the_plain_kernel() {
    let shape = sphere_shape(1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let raw = shape.sample_input(200, 0.0, &mut rng).unwrap();
    let (cloud, t) = normalize_to_unit_cube(&raw).unwrap();
    let sup = shape.draw_supervision(2000, 200, &t, &mut rng);
    let eps = default_epsilon(&cloud);
    let field = ImplicitField::fit(&augment(&cloud, eps).unwrap(), Arc::new(NoFeatures), 0.0, None).unwrap();
    let v = evaluate_loss(&field, &sup, 1.0 / eps, 1.0 / eps).unwrap();
    // a decent reconstruction classifies most of the volume correctly
    assert!(v.bce < 0.3, "{v:?}");
    assert!(v.loss >= v.bce);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut c = tiny_config();
    c.learning_rate = 0.0;
    c.steps = 2;
    let mut t = Trainer::new(c).unwrap();
    let before = t.params().clone();
    t.run(None, |_| {}).unwrap();
    assert_eq!(t.params(), &before);
    assert_eq!(t.steps_done(), 2);
}

#[test]
fn runs_are_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny_config();
    let mut a = Trainer::new(c.clone()).unwrap();
    let csv_a = dir.path().join("a.csv");
    let ha = a.run(Some(&csv_a), |_| {}).unwrap();
    let mut b = Trainer::new(c.clone()).unwrap();
    let csv_b = dir.path().join("b.csv");
    let hb = b.run(Some(&csv_b), |_| {}).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(std::fs::read(&csv_a).unwrap(), std::fs::read(&csv_b).unwrap());
    let text = std::fs::read_to_string(&csv_a).unwrap();
    assert_eq!(text.lines().next(), Some(CSV_HEADER));
    assert_eq!(text.lines().count(), 1 + c.steps);

    // stop halfway, checkpoint, resume
    let mut half = c.clone();
    half.steps = 2;
    let mut r = Trainer::new(half).unwrap();
    let csv_r = dir.path().join("r.csv");
    r.run(Some(&csv_r), |_| {}).unwrap();
    let ckpt = dir.path().join("r.nkf");
    r.save_checkpoint(&ckpt).unwrap();
    let mut r = Trainer::resume(c.clone(), &ckpt).unwrap();
    assert_eq!(r.steps_done(), 2);
    r.run(Some(&csv_r), |_| {}).unwrap();
    assert_eq!(r.params(), a.params());
    assert_eq!(std::fs::read(&csv_r).unwrap(), std::fs::read(&csv_a).unwrap());
}

#[test]
fn zero_steps_checkpoint_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config();
    c.steps = 0;
    let mut t = Trainer::new(c.clone()).unwrap();
    t.run(None, |_| {}).unwrap();
    let path = dir.path().join("init.nkf");
    t.save_checkpoint(&path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, INIT_STREAM, 0));
    let init = FeatureNetworkParams::init(c.network(), &mut rng).unwrap();
    assert_eq!(FeatureNetworkParams::load(&path).unwrap(), init);
}

#[test]
fn resume_rejects_a_different_network() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny_config();
    let t = Trainer::with_parts(c.clone(), FeatureNetworkParams::zeros(c.network()).unwrap(), Vec::new());
    let path = dir.path().join("z.nkf");
    t.save_checkpoint(&path).unwrap();
    let mut other = c;
    other.channels = 8;
    other.widths = Some([4, 8, 8]);
    assert!(matches!(Trainer::resume(other, &path), Err(NkfError::Config(_))));
}

/// Fixed input and supervision for before/after comparisons.
fn fixed_problem(shape: &TrainingShape, c: &TrainConfig, seed: u64) -> (OrientedPointCloud, SupervisionSample, LossSettings) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = shape.sample_input(c.input_points, 0.0, &mut rng).unwrap();
    let (cloud, t) = normalize_to_unit_cube(&raw).unwrap();
    let sup = shape.draw_supervision(c.volume_points, c.surface_points, &t, &mut rng);
    let settings = LossSettings::resolve(c, &cloud);
    (cloud, sup, settings)
}

#[test]
fn overfitting_one_shape_reduces_the_loss() {
    let mut c = tiny_config();
    c.steps = 500;
    c.learning_rate = 3e-3;
    c.input_points = 30;
    c.channels = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shape = TrainingShape::new(ProceduralShape::random(ShapeKind::Torus, &mut rng).mesh(32).unwrap(), 4000, 1000, 5).unwrap();
    let (cloud, sup, settings) = fixed_problem(&shape, &c, 99);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, INIT_STREAM, 0));
    let params = FeatureNetworkParams::init(c.network(), &mut rng).unwrap();
    let (before, _) = shape_gradient(&params, &cloud, &sup, &settings).unwrap();
    let mut t = Trainer::with_parts(c, params, vec![shape]);
    let history = t.run(None, |_| {}).unwrap();
    let (after, _) = shape_gradient(t.params(), &cloud, &sup, &settings).unwrap();
    assert!(after.loss < before.loss, "before {before:?} after {after:?}");
    assert!(history.iter().all(|m| m.loss.is_finite() && m.loss >= 0.0));
}

fn output_layer_gradient(params: &FeatureNetworkParams, seed: u64) -> f64 {
    let c = tiny_config();
    let shape = sphere_shape(2);
    let (cloud, sup, settings) = fixed_problem(&shape, &c, seed);
    let (_, grad) = shape_gradient(params, &cloud, &sup, &settings).unwrap();
    let mut at = 0;
    for s in params.segments() {
        if s.name == "backbone.out.weight" {
            return grad[at..at + s.data.len()].iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        at += s.data.len();
    }
    unreachable!()
}

#[test]
fn first_step_reaches_the_output_layer() {
    let c = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = FeatureNetworkParams::init(c.network(), &mut rng).unwrap();
    assert!(output_layer_gradient(&params, 3) > 0.0);
}

#[test]
fn zero_features_are_a_stationary_point() {
    // the kernel only sees features through dot products and norms, so
    // with the output layer at zero no gradient reaches any layer
    let c = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut params = FeatureNetworkParams::init(c.network(), &mut rng).unwrap();
    for s in params.segments_mut() {
        if s.name.starts_with("backbone.out.") {
            s.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    assert_eq!(output_layer_gradient(&params, 3), 0.0);
}

fn end_to_end_check(weighted: bool) -> f64 {
    let c = TrainConfig {
        resolution: 4,
        channels: 3,
        widths: Some([2, 3, 3]),
        input_points: 10,
        volume_points: 40,
        surface_points: 10,
        lambda: if weighted { 1e-2 } else { 0.0 },
        weighted,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let shape = sphere_shape(6);
    let (cloud, sup, settings) = fixed_problem(&shape, &c, 8);
    assert_eq!(sup.volume_points.len() + sup.surface_points.len(), 50);
    let mut params = FeatureNetworkParams::zeros(c.network()).unwrap();
    for s in params.segments_mut() {
        s.data.iter_mut().for_each(|v| *v = rng.gen_range(-0.4..0.4));
    }
    let p0 = params.to_flat();
    let coords: Vec<usize> = rand::seq::index::sample(&mut rng, p0.len(), 32).into_vec();
    let f = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut q = params.clone();
        q.set_flat(p)?;
        let (v, g) = shape_gradient(&q, &cloud, &sup, &settings)?;
        Ok((v.loss, g))
    };
    grad_check(f, &p0, 1e-5, &coords).unwrap()
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let e = end_to_end_check(false);
    assert!(e <= 1e-4, "{e}");
}

#[test]
fn weighted_end_to_end_gradient_matches_finite_differences() {
    let e = end_to_end_check(true);
    assert!(e <= 1e-4, "{e}");
}

#[test]
fn non_finite_loss_reports_diagnostics() {
    let c = tiny_config();
    let shape = sphere_shape(3);
    let (cloud, sup, mut settings) = fixed_problem(&shape, &c, 3);
    settings.lambda_l1 = f64::INFINITY;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = FeatureNetworkParams::init(c.network(), &mut rng).unwrap();
    let err = shape_gradient(&params, &cloud, &sup, &settings).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("lambda") && msg.contains("condition"), "{msg}");
}

#[test]
fn datasets_are_reproducible() {
    let a = procedural_shapes(10, 4);
    assert_eq!(a, procedural_shapes(10, 4));
    assert_ne!(a, procedural_shapes(10, 5));
    let kinds: Vec<ShapeKind> = a.iter().map(|s| s.kind).collect();
    assert_eq!(&kinds[..5], &ShapeKind::ALL);
}

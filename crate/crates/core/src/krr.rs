//! Kernel ridge regression over augmented points: the dense SPD solve,
//! its weighted variant, field evaluation and diagnostics.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::error::{NkfError, Result};
use crate::geometry::{AugmentedPointSet, OrientedPointCloud, Vec3};
use crate::kernel::{FeatureAugmentedPoint, GramMatrix, KernelBasis};

/// Number of queries evaluated per parallel work item.
pub const DEFAULT_CHUNK: usize = 4096;

const JITTER_START: f64 = 1e-10;
const JITTER_STOP: f64 = 1e-6;

/// Supplies the learned feature `φ(x)` at arbitrary positions.
pub trait FeatureSource: Send + Sync {
    fn dim(&self) -> usize;
    fn feature_into(&self, x: &Vec3, out: &mut [f64]);

    fn feature(&self, x: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.feature_into(x, &mut out);
        out
    }
}

/// The plain Neural Spline kernel: no features at all.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoFeatures;

impl FeatureSource for NoFeatures {
    fn dim(&self) -> usize {
        0
    }

    fn feature_into(&self, _x: &Vec3, _out: &mut [f64]) {}
}

/// Factorization of `A = G + λI` (or `WGW + λI`) and the solution.
pub struct Factorized {
    pub coefficients: DVector<f64>,
    pub factor: Cholesky<f64, Dyn>,
    /// Diagonal shift actually applied (requested λ plus any jitter).
    pub shift: f64,
}

impl std::fmt::Debug for Factorized {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Factorized")
            .field("n", &self.coefficients.len())
            .field("shift", &self.shift)
            .finish()
    }
}

/// Cholesky-solves `(A + λI) x = rhs`. With `λ = 0` a failed factorization
/// is retried with jitter `1e-10·tr(A)/n`, growing tenfold up to
/// `1e-6·tr(A)/n`.
pub fn factor_and_solve(a: &DMatrix<f64>, rhs: &DVector<f64>, lambda: f64) -> Result<Factorized> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n || rhs.len() != n {
        return Err(NkfError::DimensionMismatch { expected: n, actual: rhs.len() });
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(NkfError::InvalidInput(format!("lambda must be >= 0, got {lambda}")));
    }
    if !rhs.iter().all(|v| v.is_finite()) {
        return Err(NkfError::NonFinite("labels".into()));
    }
    let scale = a.trace() / n as f64;
    let mut shifts = vec![lambda];
    if lambda == 0.0 {
        let mut j = JITTER_START;
        while j <= JITTER_STOP * (1.0 + 1e-9) {
            shifts.push(j * scale);
            j *= 10.0;
        }
    }
    for &shift in &shifts {
        let mut shifted = a.clone();
        for i in 0..n {
            shifted[(i, i)] += shift;
        }
        if let Some(factor) = Cholesky::new(shifted) {
            if shift != lambda {
                log::warn!("Gram factorization needed jitter {shift:e}");
            }
            let mut x = factor.solve(rhs);
            // one step of iterative refinement
            let mut r = rhs - a * &x;
            r.axpy(-shift, &x, 1.0);
            x += factor.solve(&r);
            return Ok(Factorized { coefficients: x, factor, shift });
        }
    }
    Err(NkfError::SingularSystem {
        max_jitter: shifts.last().copied().unwrap_or(lambda),
    })
}

/// Solved (or solvable) ridge-regression system over a kernel basis.
#[derive(Debug)]
pub struct KernelSystem {
    basis: KernelBasis,
    gram: GramMatrix,
    labels: Vec<f64>,
    lambda: f64,
    weights: Option<Vec<f64>>,
    solution: Factorized,
}

impl KernelSystem {
    /// `α = (G + λI)⁻¹ y`.
    pub fn solve(points: &[FeatureAugmentedPoint], labels: &[f64], lambda: f64) -> Result<Self> {
        let basis = KernelBasis::new(points)?;
        let gram = basis.gram();
        Self::solve_with_gram(basis, gram, labels, lambda)
    }

    /// Solves against a caller-provided Gram matrix (which must belong to `basis`).
    pub fn solve_with_gram(
        basis: KernelBasis,
        gram: GramMatrix,
        labels: &[f64],
        lambda: f64,
    ) -> Result<Self> {
        check_labels(&gram, labels)?;
        let y = DVector::from_column_slice(labels);
        let solution = factor_and_solve(gram.matrix(), &y, lambda)?;
        Ok(Self { basis, gram, labels: labels.to_vec(), lambda, weights: None, solution })
    }

    /// `α = (WGW + λI)⁻¹ W y` with `W = diag(weights)`; requires `λ > 0`.
    pub fn solve_weighted(
        points: &[FeatureAugmentedPoint],
        labels: &[f64],
        lambda: f64,
        weights: &[f64],
    ) -> Result<Self> {
        let basis = KernelBasis::new(points)?;
        let gram = basis.gram();
        Self::solve_weighted_with_gram(basis, gram, labels, lambda, weights)
    }

    pub fn solve_weighted_with_gram(
        basis: KernelBasis,
        gram: GramMatrix,
        labels: &[f64],
        lambda: f64,
        weights: &[f64],
    ) -> Result<Self> {
        check_labels(&gram, labels)?;
        if weights.len() != labels.len() {
            return Err(NkfError::DimensionMismatch { expected: labels.len(), actual: weights.len() });
        }
        if !weights.iter().all(|w| w.is_finite() && *w >= 0.0) {
            return Err(NkfError::InvalidInput("weights must be finite and non-negative".into()));
        }
        if !(lambda > 0.0) {
            return Err(NkfError::WeightedNeedsRegularization);
        }
        let n = labels.len();
        let g = gram.matrix();
        let wgw = DMatrix::from_fn(n, n, |i, j| weights[i] * g[(i, j)] * weights[j]);
        let wy = DVector::from_fn(n, |i, _| weights[i] * labels[i]);
        let solution = factor_and_solve(&wgw, &wy, lambda)?;
        Ok(Self {
            basis,
            gram,
            labels: labels.to_vec(),
            lambda,
            weights: Some(weights.to_vec()),
            solution,
        })
    }

    pub fn basis(&self) -> &KernelBasis {
        &self.basis
    }

    pub fn gram(&self) -> &GramMatrix {
        &self.gram
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn coefficients(&self) -> &DVector<f64> {
        &self.solution.coefficients
    }

    pub fn factorization(&self) -> &Factorized {
        &self.solution
    }

    /// `‖(G + λI)α − y‖ / ‖y‖` for the unweighted system.
    pub fn relative_residual(&self) -> f64 {
        let a = self.coefficients();
        let mut r = self.gram.matrix() * a;
        r.axpy(self.lambda, a, 1.0);
        let y = DVector::from_column_slice(&self.labels);
        let ny = y.norm();
        (r - &y).norm() / if ny > 0.0 { ny } else { 1.0 }
    }

    /// Rough condition estimate `(max L_ii / min L_ii)²` of the factorized matrix.
    pub fn condition_estimate(&self) -> f64 {
        let l = self.solution.factor.l_dirty();
        let d = l.diagonal();
        let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        (hi / lo).powi(2)
    }
}

fn check_labels(gram: &GramMatrix, labels: &[f64]) -> Result<()> {
    if labels.len() != gram.n() {
        return Err(NkfError::DimensionMismatch { expected: gram.n(), actual: labels.len() });
    }
    if !labels.iter().all(|v| v.is_finite()) {
        return Err(NkfError::NonFinite("labels".into()));
    }
    Ok(())
}

/// `αᵀ G α`, the RKHS norm of the fitted function.
pub fn kernel_norm(system: &KernelSystem) -> f64 {
    let a = system.coefficients();
    a.dot(&(system.gram.matrix() * a))
}

/// The implicit function `f(x) = Σ_j α_j K([x : φ(x)], center_j)`.
#[derive(Clone)]
pub struct ImplicitField {
    system: Arc<KernelSystem>,
    features: Arc<dyn FeatureSource>,
    chunk: usize,
}

impl std::fmt::Debug for ImplicitField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImplicitField")
            .field("centers", &self.system.basis.len())
            .field("feature_dim", &self.features.dim())
            .finish()
    }
}

impl ImplicitField {
    pub fn new(system: KernelSystem, features: Arc<dyn FeatureSource>) -> Result<Self> {
        if system.basis.feature_dim() != features.dim() {
            return Err(NkfError::DimensionMismatch {
                expected: system.basis.feature_dim(),
                actual: features.dim(),
            });
        }
        Ok(Self { system: Arc::new(system), features, chunk: DEFAULT_CHUNK })
    }

    /// Lifts the augmented points through `features`, then solves
    /// (weighted when `weights` is given).
    pub fn fit(
        augmented: &AugmentedPointSet,
        features: Arc<dyn FeatureSource>,
        lambda: f64,
        weights: Option<&[f64]>,
    ) -> Result<Self> {
        let centers = lift(&augmented.points, features.as_ref());
        let system = match weights {
            Some(w) => KernelSystem::solve_weighted(&centers, &augmented.labels, lambda, w)?,
            None => KernelSystem::solve(&centers, &augmented.labels, lambda)?,
        };
        Self::new(system, features)
    }

    pub fn with_chunk_size(mut self, chunk: usize) -> Self {
        self.chunk = chunk.max(1);
        self
    }

    pub fn system(&self) -> &KernelSystem {
        &self.system
    }

    pub fn features(&self) -> &Arc<dyn FeatureSource> {
        &self.features
    }

    pub fn value(&self, x: &Vec3) -> f64 {
        let d = self.features.dim();
        let mut q = Vec::with_capacity(d + 4);
        self.value_with(x, &mut q)
    }

    fn value_with(&self, x: &Vec3, q: &mut Vec<f64>) -> f64 {
        let d = self.features.dim();
        q.clear();
        q.extend_from_slice(x.as_slice());
        q.resize(3 + d, 0.0);
        self.features.feature_into(x, &mut q[3..]);
        q.push(1.0);
        let qn = crate::kernel::norm(q);
        self.system.basis.weighted_sum(q, qn, self.system.coefficients().as_slice())
    }

    /// Evaluates the field at every query, chunked and in parallel; the
    /// output order matches the input order.
    pub fn evaluate(&self, queries: &[Vec3]) -> Vec<f64> {
        let mut out = vec![0.0; queries.len()];
        out.par_chunks_mut(self.chunk)
            .zip(queries.par_chunks(self.chunk))
            .for_each(|(o, q)| {
                let mut buf = Vec::new();
                for (v, x) in o.iter_mut().zip(q) {
                    *v = self.value_with(x, &mut buf);
                }
            });
        out
    }
}

/// Attaches `φ(x)` to every position.
pub fn lift(points: &[Vec3], features: &dyn FeatureSource) -> Vec<FeatureAugmentedPoint> {
    points
        .iter()
        .map(|p| FeatureAugmentedPoint::new(*p, features.feature(p)))
        .collect()
}

/// `Σ_i f(x_i)² + (f(x_i⁺) − ε)² + (f(x_i⁻) + ε)²`.
pub fn ns_residual_loss(field: &ImplicitField, cloud: &OrientedPointCloud, epsilon: f64) -> f64 {
    let s = cloud.len();
    let mut queries = Vec::with_capacity(3 * s);
    queries.extend_from_slice(cloud.points());
    for (x, n) in cloud.points().iter().zip(cloud.normals()) {
        queries.push(x + n * epsilon);
    }
    for (x, n) in cloud.points().iter().zip(cloud.normals()) {
        queries.push(x - n * epsilon);
    }
    let f = field.evaluate(&queries);
    (0..s)
        .map(|i| f[i].powi(2) + (f[s + i] - epsilon).powi(2) + (f[2 * s + i] + epsilon).powi(2))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{augment, augment_with, AugmentMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_system(labels: &[f64], lambda: f64) -> KernelSystem {
        let basis = KernelBasis::new(&[
            FeatureAugmentedPoint::plain(Vec3::zeros()),
            FeatureAugmentedPoint::plain(Vec3::x()),
        ])
        .unwrap();
        KernelSystem::solve_with_gram(basis, GramMatrix(DMatrix::identity(2, 2)), labels, lambda).unwrap()
    }

    #[test]
    fn identity_gram_seam() {
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15);
        let s = identity_system(&[1.0, -1.0], 0.0);
        assert!(close(s.coefficients().as_slice(), &[1.0, -1.0]));
        assert!((kernel_norm(&s) - 2.0).abs() < 1e-15);
        let s = identity_system(&[1.0, -1.0], 1.0);
        assert!(close(s.coefficients().as_slice(), &[0.5, -0.5]));
    }

    fn pair_field() -> (ImplicitField, AugmentedPointSet) {
        let cloud = OrientedPointCloud::new(vec![Vec3::zeros()], vec![Vec3::z()]).unwrap();
        let aug = augment(&cloud, 0.5).unwrap();
        (ImplicitField::fit(&aug, Arc::new(NoFeatures), 0.0, None).unwrap(), aug)
    }

    #[test]
    fn single_pair_system() {
        let (field, aug) = pair_field();
        let a = field.system().coefficients();
        // 2x2 oracle: [[g0, g1], [g1, g0]] α = (0.5, -0.5) => α0 = 0.5 / (g0 - g1)
        let g = field.system().gram().matrix();
        let oracle = 0.5 / (g[(0, 0)] - g[(0, 1)]);
        assert!((a[0] - oracle).abs() < 1e-12);
        assert!((a[0] - 0.4446).abs() < 1e-4);
        assert!((a[1] + 0.4446).abs() < 1e-4);

        assert!(field.value(&Vec3::zeros()).abs() < 1e-10);
        assert!((field.value(&aug.points[0]) - 0.5).abs() < 1e-8);
        // αᵀGα = αᵀy when λ = 0
        assert!((kernel_norm(field.system()) - a.dot(&DVector::from_column_slice(&aug.labels))).abs() < 1e-12);
        assert!((kernel_norm(field.system()) - 0.4446).abs() < 1e-4);
    }

    #[test]
    fn zero_coefficients_evaluate_to_zero() {
        let cloud = OrientedPointCloud::new(vec![Vec3::zeros(), Vec3::x()], vec![Vec3::z(); 2]).unwrap();
        let aug = augment(&cloud, 0.1).unwrap();
        let centers = lift(&aug.points, &NoFeatures);
        let s = KernelSystem::solve_weighted(&centers, &aug.labels, 1e-3, &[0.0; 4]).unwrap();
        assert!(s.coefficients().iter().all(|&a| a == 0.0));
        assert_eq!(kernel_norm(&s), 0.0);
        let field = ImplicitField::new(s, Arc::new(NoFeatures)).unwrap();
        assert!(field.evaluate(&[Vec3::zeros(), Vec3::y()]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weighted_needs_lambda() {
        let centers = vec![FeatureAugmentedPoint::plain(Vec3::zeros())];
        assert!(matches!(
            KernelSystem::solve_weighted(&centers, &[1.0], 0.0, &[1.0]),
            Err(NkfError::WeightedNeedsRegularization)
        ));
        assert!(KernelSystem::solve(&centers, &[f64::NAN], 0.0).is_err());
        assert!(KernelSystem::solve_weighted(&centers, &[1.0], 1.0, &[-1.0]).is_err());
    }

    fn random_cloud(rng: &mut ChaCha8Rng, s: usize) -> OrientedPointCloud {
        let pts: Vec<Vec3> = (0..s)
            .map(|_| {
                let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                v.normalize() * 0.4
            })
            .collect();
        let normals = pts.iter().map(|p| p.normalize()).collect();
        OrientedPointCloud::new(pts, normals).unwrap()
    }

    #[test]
    fn weighted_identity_matches_unweighted() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = random_cloud(&mut rng, 15);
        let aug = augment(&cloud, 0.02).unwrap();
        let centers = lift(&aug.points, &NoFeatures);
        let plain = KernelSystem::solve(&centers, &aug.labels, 1e-3).unwrap();
        let weighted = KernelSystem::solve_weighted(&centers, &aug.labels, 1e-3, &vec![1.0; 30]).unwrap();
        let diff = (plain.coefficients() - weighted.coefficients()).norm();
        assert!(diff <= 1e-10 * plain.coefficients().norm());
    }

    #[test]
    fn zero_weight_equals_removed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cloud = random_cloud(&mut rng, 5);
        let aug = augment(&cloud, 0.05).unwrap();
        let centers = lift(&aug.points, &NoFeatures);
        let weights: Vec<f64> = (0..10).map(|_| rng.gen_range(0.5..1.0)).collect();
        let mut w0 = weights.clone();
        w0[3] = 0.0;
        let full = ImplicitField::new(
            KernelSystem::solve_weighted(&centers, &aug.labels, 1e-3, &w0).unwrap(),
            Arc::new(NoFeatures),
        )
        .unwrap();
        // oracle: re-solve on the nine remaining centers
        let keep: Vec<usize> = (0..10).filter(|&i| i != 3).collect();
        let c9: Vec<_> = keep.iter().map(|&i| centers[i].clone()).collect();
        let y9: Vec<f64> = keep.iter().map(|&i| aug.labels[i]).collect();
        let w9: Vec<f64> = keep.iter().map(|&i| weights[i]).collect();
        let reduced = ImplicitField::new(
            KernelSystem::solve_weighted(&c9, &y9, 1e-3, &w9).unwrap(),
            Arc::new(NoFeatures),
        )
        .unwrap();
        let probe: Vec<Vec3> = (0..1000)
            .map(|i| {
                let (a, b, c) = (i / 100, (i / 10) % 10, i % 10);
                Vec3::new(a as f64, b as f64, c as f64) / 9.0 - Vec3::repeat(0.5)
            })
            .collect();
        let fa = full.evaluate(&probe);
        let fb = reduced.evaluate(&probe);
        let max = fa.iter().zip(&fb).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max <= 1e-6, "{max}");
    }

    #[test]
    fn jitter_rescues_duplicate_centers() {
        let p = FeatureAugmentedPoint::plain(Vec3::new(0.1, 0.2, 0.3));
        let s = KernelSystem::solve(&[p.clone(), p], &[1.0, 1.0], 0.0).unwrap();
        assert!(s.factorization().shift > 0.0);
        // the duplicated center splits its label evenly
        assert!((s.coefficients()[0] - s.coefficients()[1]).abs() < 1e-6);
    }

    #[test]
    fn singular_system_errors() {
        let basis = KernelBasis::new(&[
            FeatureAugmentedPoint::plain(Vec3::zeros()),
            FeatureAugmentedPoint::plain(Vec3::x()),
        ])
        .unwrap();
        let g = GramMatrix(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]));
        assert!(matches!(
            KernelSystem::solve_with_gram(basis, g, &[1.0, 1.0], 0.0),
            Err(NkfError::SingularSystem { .. })
        ));
    }

    #[test]
    fn residual_and_interpolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cloud = random_cloud(&mut rng, 40);
        let eps = 0.05;
        let aug = augment(&cloud, eps).unwrap();
        let field = ImplicitField::fit(&aug, Arc::new(NoFeatures), 0.0, None).unwrap();
        assert!(field.system().relative_residual() <= 1e-8);
        let f = field.evaluate(&aug.points);
        for (v, y) in f.iter().zip(&aug.labels) {
            assert!((v - y).abs() / eps <= 1e-6);
        }
        // ± terms vanish; what remains is the surface term
        let loss = ns_residual_loss(&field, &cloud, eps);
        let surface: f64 = field.evaluate(cloud.points()).iter().map(|v| v * v).sum();
        assert!((loss - surface).abs() <= 1e-10 * 40.0 * eps * eps);
    }

    #[test]
    fn residual_loss_of_zero_field() {
        let cloud = OrientedPointCloud::new(vec![Vec3::zeros(), Vec3::x()], vec![Vec3::z(); 2]).unwrap();
        let aug = augment(&cloud, 0.1).unwrap();
        let centers = lift(&aug.points, &NoFeatures);
        let s = KernelSystem::solve_weighted(&centers, &aug.labels, 1.0, &[0.0; 4]).unwrap();
        let field = ImplicitField::new(s, Arc::new(NoFeatures)).unwrap();
        let loss = ns_residual_loss(&field, &cloud, 0.1);
        assert!((loss - 2.0 * 2.0 * 0.01).abs() < 1e-15);
    }

    #[test]
    fn residual_loss_matches_least_squares_minimizer() {
        // with the surface samples included as centers, the interpolant
        // attains the least-squares optimum of the residual loss (zero)
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cloud = random_cloud(&mut rng, 6);
        let eps = 0.05;
        let aug = augment_with(&cloud, eps, AugmentMode::WithSurface).unwrap();
        let field = ImplicitField::fit(&aug, Arc::new(NoFeatures), 0.0, None).unwrap();
        let loss = ns_residual_loss(&field, &cloud, eps);

        // oracle: min over α of |K α - t|² by SVD least squares
        let n = aug.len();
        let k = DMatrix::from_fn(n, n, |i, j| crate::kernel::k_ns(&aug.points[i], &aug.points[j]));
        let t = DVector::from_column_slice(&aug.labels);
        let alpha = k.clone().svd(true, true).solve(&t, 1e-14).unwrap();
        let oracle = (&k * alpha - t).norm_squared();
        assert!((loss - oracle).abs() <= 1e-6, "{loss} {oracle}");
    }

    #[test]
    fn kernel_norm_decreases_with_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cloud = random_cloud(&mut rng, 25);
        let aug = augment(&cloud, 0.03).unwrap();
        let centers = lift(&aug.points, &NoFeatures);
        let norms: Vec<f64> = [0.0, 1e-4, 1e-2, 1.0]
            .iter()
            .map(|&l| kernel_norm(&KernelSystem::solve(&centers, &aug.labels, l).unwrap()))
            .collect();
        for w in norms.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9), "{norms:?}");
        }
        assert!(norms.iter().all(|&v| v >= -1e-8));
    }
}

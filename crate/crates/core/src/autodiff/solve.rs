//! Linear solve node with the implicit-function adjoint.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::tape::{Backward, Tape, Tensor, Var};
use crate::error::{NkfError, Result};
use crate::krr::{factor_and_solve, Factorized};

/// Factorization and solution saved by the forward solve.
#[derive(Debug)]
pub struct SolveCache {
    factorized: Factorized,
}

impl SolveCache {
    pub fn new(factorized: Factorized) -> Self {
        Self { factorized }
    }

    pub fn solution(&self) -> &DVector<f64> {
        &self.factorized.coefficients
    }

    /// Diagonal shift that was added to the matrix (λ plus any jitter).
    pub fn shift(&self) -> f64 {
        self.factorized.shift
    }
}

/// Adjoints of `α = A⁻¹ y` for an upstream `ᾱ`: returns `(Ḡ, ȳ)` with
/// `ȳ = A⁻¹ ᾱ` and `Ḡ = -½(ȳ αᵀ + α ȳᵀ)`, row-major.
pub fn solve_backward(cache: Option<&SolveCache>, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let cache = cache.ok_or_else(|| NkfError::InvalidInput("solve backward needs the forward factorization".into()))?;
    let alpha = cache.solution();
    let n = alpha.len();
    if upstream.len() != n {
        return Err(NkfError::DimensionMismatch { expected: n, actual: upstream.len() });
    }
    let ybar = cache.factorized.factor.solve(&DVector::from_column_slice(upstream));
    let mut gbar = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            gbar[i * n + j] = -0.5 * (ybar[i] * alpha[j] + alpha[i] * ybar[j]);
        }
    }
    Ok((gbar, ybar.as_slice().to_vec()))
}

struct SolveOp {
    cache: Arc<SolveCache>,
}

impl Backward for SolveOp {
    fn name(&self) -> &'static str {
        "solve"
    }

    fn backward(&self, _i: &[&Tensor], _o: &Tensor, grad: &[f64], needs: &[bool], grads: &mut [Vec<f64>]) {
        let (gbar, ybar) = solve_backward(Some(&self.cache), grad).expect("solve adjoint shapes are fixed at record time");
        if needs[0] {
            grads[0].copy_from_slice(&gbar);
        }
        if needs[1] {
            grads[1].copy_from_slice(&ybar);
        }
    }
}

impl Tape {
    /// `α = (G + λI)⁻¹ y` for symmetric positive definite `G: [n, n]`.
    ///
    /// Only the lower triangle of `G` is read by the factorization; the
    /// adjoint is the symmetric one, which is exact for any `G` produced by a
    /// symmetric computation.
    pub fn solve(&mut self, g: Var, y: Var, lambda: f64) -> Result<(Var, Arc<SolveCache>)> {
        let (gv, yv) = (self.value(g), self.value(y));
        let n = yv.len();
        if gv.shape() != [n, n] {
            return Err(NkfError::DimensionMismatch { expected: n * n, actual: gv.len() });
        }
        if !gv.data().iter().all(|v| v.is_finite()) {
            return Err(NkfError::NonFinite("system matrix".into()));
        }
        let a = DMatrix::from_row_slice(n, n, gv.data());
        let rhs = DVector::from_column_slice(yv.data());
        let cache = Arc::new(SolveCache::new(factor_and_solve(&a, &rhs, lambda)?));
        let t = Tensor::vector(cache.solution().as_slice().to_vec());
        let v = self.push(t, &[g, y], Box::new(SolveOp { cache: cache.clone() }));
        Ok((v, cache))
    }
}

use crate::error::{NkfError, Result};

/// Compares an analytic gradient against central differences.
///
/// `f` returns the value and full gradient at a parameter vector. Only the
/// listed coordinates are probed (all of them when `coords` is empty).
/// Returns the largest `|a - c| / (|a| + |c| + 1e-12)`.
pub fn grad_check<F>(mut f: F, p0: &[f64], step: f64, coords: &[usize]) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (v0, analytic) = f(p0)?;
    if !v0.is_finite() {
        return Err(NkfError::NonFinite("grad_check objective".into()));
    }
    if analytic.len() != p0.len() {
        return Err(NkfError::DimensionMismatch { expected: p0.len(), actual: analytic.len() });
    }
    let all: Vec<usize>;
    let coords = if coords.is_empty() {
        all = (0..p0.len()).collect();
        &all
    } else {
        coords
    };
    let mut worst = 0.0f64;
    let mut p = p0.to_vec();
    for &i in coords {
        p[i] = p0[i] + step;
        let (plus, _) = f(&p)?;
        p[i] = p0[i] - step;
        let (minus, _) = f(&p)?;
        p[i] = p0[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NkfError::NonFinite(format!("grad_check objective at coordinate {i}")));
        }
        let central = (plus - minus) / (2.0 * step);
        let a = analytic[i];
        worst = worst.max((a - central).abs() / (a.abs() + central.abs() + 1e-12));
    }
    Ok(worst)
}

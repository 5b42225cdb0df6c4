//! The Neural Spline kernel on homogeneous coordinates and its
//! feature-conditioned variant.
//!
//! For homogeneous inputs `u = (x, 1)`, `v = (z, 1)` with angle `θ`:
//!
//! ```text
//! K(u, v) = (|u| |v| / π) (sin θ + 2 (π - θ) cos θ)
//! ```
//!
//! The angle always comes from Kahan's formula
//! `θ = 2 atan(| |v| u - |u| v | / | |v| u + |u| v |)`, which keeps full
//! relative accuracy for nearly parallel inputs. Sine and cosine follow from
//! the same two norms without further transcendental calls.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{NkfError, Result};
use crate::geometry::Vec3;

/// Angle between two nonzero vectors, in `[0, π]`.
pub fn stable_angle(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(NkfError::DimensionMismatch { expected: u.len(), actual: v.len() });
    }
    let a = norm(u);
    let b = norm(v);
    if !(a > 0.0) || !(b > 0.0) {
        return Err(NkfError::InvalidInput("angle of a zero vector".into()));
    }
    Ok(AngleParts::new(u, v, a, b).theta)
}

#[inline]
pub(crate) fn norm(u: &[f64]) -> f64 {
    u.iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// Norms of `|v| u - |u| v` and `|v| u + |u| v` plus the angle they imply.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AngleParts {
    pub diff: f64,
    pub sum: f64,
    pub theta: f64,
}

impl AngleParts {
    #[inline]
    pub fn new(u: &[f64], v: &[f64], a: f64, b: f64) -> Self {
        let mut d2 = 0.0;
        let mut s2 = 0.0;
        for (ui, vi) in u.iter().zip(v) {
            let bu = b * ui;
            let av = a * vi;
            d2 += (bu - av) * (bu - av);
            s2 += (bu + av) * (bu + av);
        }
        let diff = d2.sqrt();
        let sum = s2.sqrt();
        let theta = if sum > 0.0 { 2.0 * (diff / sum).atan() } else { PI };
        Self { diff, sum, theta }
    }

    /// (sin θ, cos θ) from the half-angle tangent `diff / sum`.
    #[inline]
    pub fn sin_cos(&self) -> (f64, f64) {
        let d2 = self.diff * self.diff;
        let s2 = self.sum * self.sum;
        let r = d2 + s2;
        if r == 0.0 {
            return (0.0, 1.0);
        }
        (2.0 * self.diff * self.sum / r, (s2 - d2) / r)
    }
}

/// Kernel value for homogeneous vectors with precomputed norms.
#[inline]
pub(crate) fn k_homogeneous(u: &[f64], v: &[f64], a: f64, b: f64) -> f64 {
    let parts = AngleParts::new(u, v, a, b);
    let (s, c) = parts.sin_cos();
    a * b / PI * (s + 2.0 * (PI - parts.theta) * c)
}

/// Kernel value plus its gradients with respect to both homogeneous inputs.
///
/// At coincident directions the angle is not differentiable; the angular
/// part of the gradient is taken as zero there (a valid subgradient since
/// θ attains its minimum).
pub(crate) fn k_homogeneous_grad(
    u: &[f64],
    v: &[f64],
    a: f64,
    b: f64,
    grad_u: &mut [f64],
    grad_v: &mut [f64],
) -> f64 {
    let parts = AngleParts::new(u, v, a, b);
    let (s, c) = parts.sin_cos();
    let theta = parts.theta;
    let j = s + 2.0 * (PI - theta) * c;
    // -dJ/dθ
    let jp = c + 2.0 * (PI - theta) * s;
    let radial_u = b / (a * PI) * j;
    let radial_v = a / (b * PI) * j;
    for (g, ui) in grad_u.iter_mut().zip(u) {
        *g = radial_u * ui;
    }
    for (g, vi) in grad_v.iter_mut().zip(v) {
        *g = radial_v * vi;
    }
    if parts.diff > 0.0 && parts.sum > 0.0 {
        // unit perpendiculars built from the (orthogonal) sum and difference
        // directions: e_u = sin(θ/2) p - cos(θ/2) q, e_v = sin(θ/2) p + cos(θ/2) q
        let h = parts.diff.hypot(parts.sum);
        let sin_half = parts.diff / h;
        let cos_half = parts.sum / h;
        let tu = b / PI * jp;
        let tv = a / PI * jp;
        for k in 0..u.len() {
            let bu = b * u[k];
            let av = a * v[k];
            let p = (bu + av) / parts.sum;
            let q = (bu - av) / parts.diff;
            grad_u[k] += tu * (sin_half * p - cos_half * q);
            grad_v[k] += tv * (sin_half * p + cos_half * q);
        }
    }
    a * b / PI * j
}

/// Neural Spline kernel between two points.
pub fn k_ns(x: &Vec3, z: &Vec3) -> f64 {
    let u = [x.x, x.y, x.z, 1.0];
    let v = [z.x, z.y, z.z, 1.0];
    k_homogeneous(&u, &v, norm(&u), norm(&v))
}

/// `(x, 1)` with its norm cached; the norm is at least 1.
#[derive(Debug, Clone, PartialEq)]
pub struct HomogeneousVector {
    coords: Vec<f64>,
    norm: f64,
}

impl HomogeneousVector {
    pub fn new(prefix: impl IntoIterator<Item = f64>) -> Self {
        let mut coords: Vec<f64> = prefix.into_iter().collect();
        coords.push(1.0);
        let norm = norm(&coords);
        Self { coords, norm }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }
}

/// A position concatenated with its learned feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureAugmentedPoint {
    pub position: Vec3,
    pub feature: Vec<f64>,
}

impl FeatureAugmentedPoint {
    pub fn new(position: Vec3, feature: Vec<f64>) -> Self {
        Self { position, feature }
    }

    pub fn plain(position: Vec3) -> Self {
        Self { position, feature: Vec::new() }
    }

    pub fn homogeneous(&self) -> HomogeneousVector {
        HomogeneousVector::new(self.position.iter().copied().chain(self.feature.iter().copied()))
    }
}

/// Neural Spline kernel on `[position : feature]`.
pub fn k_learned(p: &FeatureAugmentedPoint, q: &FeatureAugmentedPoint) -> Result<f64> {
    if p.feature.len() != q.feature.len() {
        return Err(NkfError::DimensionMismatch {
            expected: p.feature.len(),
            actual: q.feature.len(),
        });
    }
    let u = p.homogeneous();
    let v = q.homogeneous();
    Ok(k_homogeneous(&u.coords, &v.coords, u.norm, v.norm))
}

/// Kernel centers stored as a dense row-major block of homogeneous vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBasis {
    dim: usize,
    coords: Vec<f64>,
    norms: Vec<f64>,
}

impl KernelBasis {
    pub fn new(points: &[FeatureAugmentedPoint]) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| NkfError::InvalidInput("empty kernel basis".into()))?;
        let d = first.feature.len();
        let dim = 3 + d + 1;
        let mut coords = Vec::with_capacity(points.len() * dim);
        let mut norms = Vec::with_capacity(points.len());
        for p in points {
            if p.feature.len() != d {
                return Err(NkfError::DimensionMismatch { expected: d, actual: p.feature.len() });
            }
            if !p.feature.iter().chain(p.position.iter()).all(|c| c.is_finite()) {
                return Err(NkfError::NonFinite("kernel center".into()));
            }
            let h = p.homogeneous();
            coords.extend_from_slice(&h.coords);
            norms.push(h.norm);
        }
        Ok(Self { dim, coords, norms })
    }

    /// Builds directly from a row-major `n × (3 + d)` block (homogeneous 1 appended).
    pub fn from_rows(rows: &[f64], width: usize) -> Self {
        let n = if width == 0 { 0 } else { rows.len() / width };
        let dim = width + 1;
        let mut coords = Vec::with_capacity(n * dim);
        let mut norms = Vec::with_capacity(n);
        for r in rows.chunks_exact(width) {
            let start = coords.len();
            coords.extend_from_slice(r);
            coords.push(1.0);
            norms.push(norm(&coords[start..]));
        }
        Self { dim, coords, norms }
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    /// Homogeneous dimension `3 + d + 1`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn feature_dim(&self) -> usize {
        self.dim - 4
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn norm_of(&self, i: usize) -> f64 {
        self.norms[i]
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        k_homogeneous(self.row(i), self.row(j), self.norms[i], self.norms[j])
    }

    /// `Σ_j weights[j] K(query, center_j)` for a homogeneous query.
    #[inline]
    pub fn weighted_sum(&self, query: &[f64], query_norm: f64, weights: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (j, w) in weights.iter().enumerate() {
            if *w != 0.0 {
                acc += w * k_homogeneous(query, self.row(j), query_norm, self.norms[j]);
            }
        }
        acc
    }

    pub fn gram(&self) -> GramMatrix {
        let n = self.len();
        // every entry is computed independently, so row-parallel assembly
        // is bitwise identical to the serial loop
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| (0..n).map(|j| self.entry(i, j)).collect())
            .collect();
        GramMatrix(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn gram_serial(&self) -> GramMatrix {
        let n = self.len();
        GramMatrix(DMatrix::from_fn(n, n, |i, j| self.entry(i, j)))
    }
}

/// Symmetric Gram matrix of kernel evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix(pub DMatrix<f64>);

impl GramMatrix {
    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn max_diagonal(&self) -> f64 {
        self.0.diagonal().max()
    }
}

pub fn gram(points: &[FeatureAugmentedPoint]) -> Result<GramMatrix> {
    Ok(KernelBasis::new(points)?.gram())
}

//! Oriented point clouds, normalization into the unit cube and the
//! dipole augmentation that turns normals into interpolation constraints.

use nalgebra::Vector3;

use crate::error::{NkfError, Result};

pub type Vec3 = Vector3<f64>;

/// Normals whose length is off by more than this are still accepted but
/// reported, since scanners rarely emit exactly unit vectors.
const NORMAL_UNIT_TOLERANCE: f64 = 1e-3;
const NORMAL_ZERO_TOLERANCE: f64 = 1e-12;

/// Surface samples with one unit normal per point.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientedPointCloud {
    points: Vec<Vec3>,
    normals: Vec<Vec3>,
}

impl OrientedPointCloud {
    /// Validates the samples and normalizes every normal to unit length.
    pub fn new(points: Vec<Vec3>, normals: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(NkfError::InvalidInput("no points parsed".into()));
        }
        if points.len() != normals.len() {
            return Err(NkfError::DimensionMismatch {
                expected: points.len(),
                actual: normals.len(),
            });
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(NkfError::NonFinite(format!("point {i}")));
        }
        let mut off_unit = 0usize;
        let mut unit = Vec::with_capacity(normals.len());
        for (i, n) in normals.into_iter().enumerate() {
            let len = n.norm();
            if !len.is_finite() || len < NORMAL_ZERO_TOLERANCE {
                return Err(NkfError::InvalidInput(format!("normal {i} has zero or non-finite length")));
            }
            if (len - 1.0).abs() > NORMAL_UNIT_TOLERANCE {
                off_unit += 1;
            }
            unit.push(n / len);
        }
        if off_unit > 0 {
            log::warn!("{off_unit} normals were not unit length and have been rescaled");
        }
        Ok(Self { points, normals: unit })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-aligned bounding box as (min, max).
    pub fn bounds(&self) -> (Vec3, Vec3) {
        bounds_of(&self.points)
    }

    /// Keeps the samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let normals = indices.iter().map(|&i| self.normals[i]).collect();
        Self::new(points, normals)
    }
}

pub(crate) fn bounds_of(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    /// Cube `[-h, h]³`.
    pub fn centered_cube(half: f64) -> Self {
        Self { min: Vec3::repeat(-half), max: Vec3::repeat(half) }
    }

    pub fn of_points(points: &[Vec3]) -> Self {
        let (min, max) = bounds_of(points);
        Self { min, max }
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) / 2.0
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb { min: self.min.inf(&other.min), max: self.max.sup(&other.max) }
    }

    /// Grows every side by `fraction` of the longest extent.
    pub fn padded(&self, fraction: f64) -> Aabb {
        let pad = Vec3::repeat(self.extent().max() * fraction);
        Aabb { min: self.min - pad, max: self.max + pad }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x.max(0.0) * e.y.max(0.0) * e.z.max(0.0)
    }
}

/// Uniform scale and translation taking world coordinates into the
/// normalized cube: `normalized = (world - offset) * scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationTransform {
    pub scale: f64,
    pub offset: Vec3,
}

impl NormalizationTransform {
    pub fn identity() -> Self {
        Self { scale: 1.0, offset: Vec3::zeros() }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (p - self.offset) * self.scale
    }

    pub fn invert(&self, p: &Vec3) -> Vec3 {
        p / self.scale + self.offset
    }

    /// The transform equivalent to applying `self` and then `next`.
    pub fn then(&self, next: &NormalizationTransform) -> NormalizationTransform {
        // ((p - o1) s1 - o2) s2 = (p - (o1 + o2 / s1)) s1 s2
        NormalizationTransform {
            scale: self.scale * next.scale,
            offset: self.offset + next.offset / self.scale,
        }
    }
}

/// Centers the bounding box at the origin and scales its longest side to 1.
pub fn normalize_to_unit_cube(
    cloud: &OrientedPointCloud,
) -> Result<(OrientedPointCloud, NormalizationTransform)> {
    let (lo, hi) = cloud.bounds();
    let extent = (hi - lo).max();
    if !(extent > 0.0) {
        return Err(NkfError::ZeroExtent);
    }
    let transform = NormalizationTransform {
        scale: 1.0 / extent,
        offset: (lo + hi) * 0.5,
    };
    let points = cloud.points.iter().map(|p| transform.apply(p)).collect();
    Ok((
        OrientedPointCloud { points, normals: cloud.normals.clone() },
        transform,
    ))
}

/// 1% of the bounding-box diagonal.
pub fn default_epsilon(cloud: &OrientedPointCloud) -> f64 {
    let (lo, hi) = cloud.bounds();
    0.01 * (hi - lo).norm()
}

/// Which input samples become kernel centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AugmentMode {
    /// Only the offset pairs `x ± εn` (2S centers).
    #[default]
    Dipole,
    /// The offset pairs followed by the surface samples themselves with
    /// label 0 (3S centers).
    WithSurface,
}

/// Kernel centers and their target values.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPointSet {
    pub points: Vec<Vec3>,
    pub labels: Vec<f64>,
    pub epsilon: f64,
}

impl AugmentedPointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Emits `x + εn` labelled `+ε` for every sample, then `x - εn` labelled `-ε`.
pub fn augment(cloud: &OrientedPointCloud, epsilon: f64) -> Result<AugmentedPointSet> {
    augment_with(cloud, epsilon, AugmentMode::Dipole)
}

pub fn augment_with(
    cloud: &OrientedPointCloud,
    epsilon: f64,
    mode: AugmentMode,
) -> Result<AugmentedPointSet> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(NkfError::InvalidEpsilon(epsilon));
    }
    let s = cloud.len();
    let cap = if mode == AugmentMode::WithSurface { 3 * s } else { 2 * s };
    let mut points = Vec::with_capacity(cap);
    let mut labels = Vec::with_capacity(cap);
    for (x, n) in cloud.points.iter().zip(&cloud.normals) {
        points.push(x + n * epsilon);
        labels.push(epsilon);
    }
    for (x, n) in cloud.points.iter().zip(&cloud.normals) {
        points.push(x - n * epsilon);
        labels.push(-epsilon);
    }
    if mode == AugmentMode::WithSurface {
        points.extend_from_slice(&cloud.points);
        labels.extend(std::iter::repeat(0.0).take(s));
    }
    Ok(AugmentedPointSet { points, labels, epsilon })
}

/// Dense supervision for one training shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionSample {
    pub volume_points: Vec<Vec3>,
    /// `true` when the matching volume point is inside the shape.
    pub occupancy: Vec<bool>,
    pub surface_points: Vec<Vec3>,
}

//! Procedural training shapes with analytic signed distances.

use nalgebra::{Rotation3, Unit};
use rand::Rng;
use rand_distr::{Distribution, UnitSphere};

use crate::error::{NkfError, Result};
use crate::geometry::Vec3;
use crate::mesh::TriangleMesh;
use crate::surfacing::{default_domain, marching_cubes, ScalarGrid};

/// One solid with a signed distance (negative inside).
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Sphere { center: Vec3, radius: f64 },
    /// Oriented box with half extents along its local axes.
    Cuboid { center: Vec3, half: Vec3, rotation: Rotation3<f64> },
    Capsule { a: Vec3, b: Vec3, radius: f64 },
    /// Ring around the local z axis.
    Torus { center: Vec3, major: f64, minor: f64, rotation: Rotation3<f64> },
}

impl Primitive {
    pub fn sdf(&self, p: &Vec3) -> f64 {
        match self {
            Self::Sphere { center, radius } => (p - center).norm() - radius,
            Self::Cuboid { center, half, rotation } => {
                let q = (rotation.inverse() * (p - center)).abs() - half;
                let outside = q.map(|v| v.max(0.0)).norm();
                outside + q.max().min(0.0)
            }
            Self::Capsule { a, b, radius } => {
                let ab = b - a;
                let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
                (p - (a + ab * t)).norm() - radius
            }
            Self::Torus { center, major, minor, rotation } => {
                let l = rotation.inverse() * (p - center);
                let ring = (l.x * l.x + l.y * l.y).sqrt() - major;
                (ring * ring + l.z * l.z).sqrt() - minor
            }
        }
    }

    /// Radius of a ball around the origin-relative anchor that contains the
    /// solid; used to keep shapes inside the domain.
    fn reach(&self) -> f64 {
        match self {
            Self::Sphere { center, radius } => center.amax() + radius,
            Self::Cuboid { center, half, .. } => center.amax() + half.norm(),
            Self::Capsule { a, b, radius } => a.amax().max(b.amax()) + radius,
            Self::Torus { center, major, minor, .. } => center.amax() + major + minor,
        }
    }
}

/// Kind of procedural shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Cuboid,
    Capsule,
    Torus,
    Union,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [Self::Sphere, Self::Cuboid, Self::Capsule, Self::Torus, Self::Union];
}

/// Union of primitives.
#[derive(Debug, Clone, PartialEq)]
pub struct ProceduralShape {
    pub kind: ShapeKind,
    pub parts: Vec<Primitive>,
}

fn random_rotation<R: Rng>(rng: &mut R) -> Rotation3<f64> {
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    Rotation3::from_axis_angle(&Unit::new_normalize(Vec3::from(axis)), angle)
}

fn random_point<R: Rng>(rng: &mut R, half: f64) -> Vec3 {
    Vec3::new(rng.gen_range(-half..=half), rng.gen_range(-half..=half), rng.gen_range(-half..=half))
}

/// Draws a primitive of roughly `size` (about half the span of the shape)
/// centred within `spread` of the origin.
fn random_primitive<R: Rng>(kind: ShapeKind, size: f64, spread: f64, rng: &mut R) -> Primitive {
    let center = random_point(rng, spread);
    match kind {
        ShapeKind::Sphere => Primitive::Sphere { center, radius: size * rng.gen_range(0.6..1.0) },
        ShapeKind::Cuboid => Primitive::Cuboid {
            center,
            half: Vec3::new(rng.gen_range(0.3..0.8), rng.gen_range(0.3..0.8), rng.gen_range(0.3..0.8)) * size,
            rotation: random_rotation(rng),
        },
        ShapeKind::Capsule => {
            let dir: [f64; 3] = UnitSphere.sample(rng);
            let half_len = size * rng.gen_range(0.5..0.9);
            let d = Vec3::from(dir) * half_len;
            Primitive::Capsule { a: center - d, b: center + d, radius: size * rng.gen_range(0.2..0.4) }
        }
        ShapeKind::Torus | ShapeKind::Union => {
            let major = size * rng.gen_range(0.55..0.8);
            Primitive::Torus { center, major, minor: major * rng.gen_range(0.25..0.4), rotation: random_rotation(rng) }
        }
    }
}

impl ProceduralShape {
    /// A random shape that fits inside `[-0.45, 0.45]³`.
    pub fn random<R: Rng>(kind: ShapeKind, rng: &mut R) -> Self {
        const LIMIT: f64 = 0.45;
        loop {
            let parts: Vec<Primitive> = match kind {
                ShapeKind::Union => {
                    let n = rng.gen_range(2..=4);
                    let singles = [ShapeKind::Sphere, ShapeKind::Cuboid, ShapeKind::Capsule, ShapeKind::Torus];
                    (0..n)
                        .map(|_| {
                            let k = singles[rng.gen_range(0..singles.len())];
                            random_primitive(k, rng.gen_range(0.12..0.22), 0.18, rng)
                        })
                        .collect()
                }
                k => vec![random_primitive(k, rng.gen_range(0.22..0.38), 0.05, rng)],
            };
            if parts.iter().all(|p| p.reach() <= LIMIT) {
                return Self { kind, parts };
            }
        }
    }

    pub fn sdf(&self, p: &Vec3) -> f64 {
        self.parts.iter().map(|s| s.sdf(p)).fold(f64::INFINITY, f64::min)
    }

    pub fn is_inside(&self, p: &Vec3) -> bool {
        self.sdf(p) < 0.0
    }

    /// Closed surface of the shape extracted from its distance field.
    pub fn mesh(&self, resolution: usize) -> Result<TriangleMesh> {
        let grid = ScalarGrid::from_fn(resolution, default_domain(), |p| self.sdf(p))?;
        let mesh = marching_cubes(&grid, 0.0)?;
        if mesh.is_empty() {
            return Err(NkfError::InvalidInput("procedural shape has no surface at this resolution".into()));
        }
        Ok(mesh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn primitive_distances() {
        let s = Primitive::Sphere { center: Vec3::zeros(), radius: 0.3 };
        assert!((s.sdf(&Vec3::new(0.5, 0.0, 0.0)) - 0.2).abs() < 1e-15);
        let b = Primitive::Cuboid { center: Vec3::zeros(), half: Vec3::repeat(0.2), rotation: Rotation3::identity() };
        assert!((b.sdf(&Vec3::new(0.3, 0.0, 0.0)) - 0.1).abs() < 1e-15);
        assert!((b.sdf(&Vec3::zeros()) + 0.2).abs() < 1e-15);
        assert!((b.sdf(&Vec3::new(0.3, 0.3, 0.0)) - 0.1 * 2f64.sqrt()).abs() < 1e-15);
        let c = Primitive::Capsule { a: Vec3::zeros(), b: Vec3::new(0.0, 0.0, 0.2), radius: 0.1 };
        assert!((c.sdf(&Vec3::new(0.0, 0.0, 0.4)) - 0.1).abs() < 1e-15);
        assert!((c.sdf(&Vec3::new(0.3, 0.0, 0.1)) - 0.2).abs() < 1e-15);
        let t = Primitive::Torus { center: Vec3::zeros(), major: 0.3, minor: 0.1, rotation: Rotation3::identity() };
        assert!((t.sdf(&Vec3::new(0.3, 0.0, 0.0)) + 0.1).abs() < 1e-15);
        assert!((t.sdf(&Vec3::zeros()) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn random_shapes_fit_and_mesh_closed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in ShapeKind::ALL {
            for _ in 0..3 {
                let s = ProceduralShape::random(kind, &mut rng);
                let m = s.mesh(40).unwrap();
                m.check_watertight().unwrap();
                let (lo, hi) = m.bounds();
                assert!(lo.min() > -0.5 && hi.max() < 0.5);
            }
        }
    }
}

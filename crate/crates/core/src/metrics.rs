//! Shape agreement metrics: volumetric IoU, Chamfer distance, normal
//! consistency and F-score over area-weighted surface samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{NkfError, Result};
use crate::geometry::{Aabb, Vec3};
use crate::krr::ImplicitField;
use crate::mesh::{occupancy_labels, TriangleMesh};

pub const DEFAULT_SAMPLES: usize = 100_000;
pub const DEFAULT_F_THRESHOLD: f64 = 0.01;

/// Exact nearest-neighbour queries over a fixed point set, bucketed on a
/// uniform grid.
#[derive(Debug, Clone)]
pub struct NearestNeighbors {
    points: Vec<Vec3>,
    origin: Vec3,
    cell: f64,
    dims: [usize; 3],
    /// CSR layout: points of cell `c` are `order[start[c]..start[c + 1]]`.
    start: Vec<usize>,
    order: Vec<u32>,
}

impl NearestNeighbors {
    pub fn new(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(NkfError::NothingToSample);
        }
        let bb = Aabb::of_points(points);
        let ext = bb.extent();
        // about two points per occupied cell on a surface-like set
        let target = (points.len() as f64 / 2.0).max(1.0);
        let area = (ext.x * ext.y + ext.y * ext.z + ext.x * ext.z).max(f64::MIN_POSITIVE);
        let mut cell = (area / target).sqrt();
        if !(cell > 0.0) || !cell.is_finite() {
            cell = ext.max().max(1e-9);
        }
        let dim = |e: f64| ((e / cell).floor() as usize + 1).min(1024);
        let dims = [dim(ext.x), dim(ext.y), dim(ext.z)];
        let mut nn = Self { points: points.to_vec(), origin: bb.min, cell, dims, start: Vec::new(), order: Vec::new() };
        let n_cells = dims[0] * dims[1] * dims[2];
        let ids: Vec<usize> = points.iter().map(|p| nn.cell_index(&nn.cell_of(p))).collect();
        let mut counts = vec![0usize; n_cells + 1];
        for &c in &ids {
            counts[c + 1] += 1;
        }
        for c in 0..n_cells {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut order = vec![0u32; points.len()];
        for (i, &c) in ids.iter().enumerate() {
            order[fill[c]] = i as u32;
            fill[c] += 1;
        }
        nn.start = counts;
        nn.order = order;
        Ok(nn)
    }

    fn cell_of(&self, p: &Vec3) -> [isize; 3] {
        let mut c = [0isize; 3];
        for a in 0..3 {
            let t = ((p[a] - self.origin[a]) / self.cell).floor();
            c[a] = (t.max(-1.0) as isize).min(self.dims[a] as isize);
        }
        c
    }

    fn cell_index(&self, c: &[isize; 3]) -> usize {
        let cl = |v: isize, a: usize| v.clamp(0, self.dims[a] as isize - 1) as usize;
        (cl(c[0], 0) * self.dims[1] + cl(c[1], 1)) * self.dims[2] + cl(c[2], 2)
    }

    /// Index of and distance to the closest point; ties go to the lower index.
    pub fn nearest(&self, q: &Vec3) -> (usize, f64) {
        let center = self.cell_of(q);
        let mut best = (usize::MAX, f64::INFINITY);
        let max_ring = self.dims.iter().max().copied().unwrap_or(1) as isize + 1;
        for ring in 0..=max_ring {
            // every point in a cell at Chebyshev ring `ring` is at least
            // (ring - 1) cells away along some axis
            if ring > 0 && ((ring - 1) as f64 * self.cell) > best.1 {
                break;
            }
            self.visit_ring(&center, ring, |i| {
                let d = (self.points[i] - q).norm();
                if d < best.1 || (d == best.1 && i < best.0) {
                    best = (i, d);
                }
            });
        }
        best
    }

    fn visit_ring(&self, center: &[isize; 3], ring: isize, mut f: impl FnMut(usize)) {
        let lo: Vec<isize> = (0..3).map(|a| (center[a] - ring).max(0)).collect();
        let hi: Vec<isize> = (0..3).map(|a| (center[a] + ring).min(self.dims[a] as isize - 1)).collect();
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    let on_ring = (x - center[0]).abs() == ring
                        || (y - center[1]).abs() == ring
                        || (z - center[2]).abs() == ring;
                    if !on_ring {
                        continue;
                    }
                    let c = (x as usize * self.dims[1] + y as usize) * self.dims[2] + z as usize;
                    for &i in &self.order[self.start[c]..self.start[c + 1]] {
                        f(i as usize);
                    }
                }
            }
        }
    }
}

/// Nearest-neighbour distances by exhaustive search; reference for the
/// grid-accelerated path.
pub fn brute_force_nearest(points: &[Vec3], q: &Vec3) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = (p - q).norm();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Area-weighted samples of a mesh surface with face normals.
#[derive(Debug, Clone)]
pub struct SurfaceSamples {
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
}

impl SurfaceSamples {
    pub fn draw(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (points, normals) = mesh.sample_surface(n, &mut rng)?;
        Ok(Self { points, normals })
    }
}

/// Per-sample nearest distances and normal agreement from `a` into `b`.
fn one_way(a: &SurfaceSamples, b: &SurfaceSamples, index: &NearestNeighbors) -> (Vec<f64>, Vec<f64>) {
    a.points
        .par_iter()
        .zip(a.normals.par_iter())
        .map(|(p, n)| {
            let (j, d) = index.nearest(p);
            (d, n.dot(&b.normals[j]))
        })
        .unzip()
}

/// Surface comparison of two sample sets in both directions.
#[derive(Debug, Clone)]
pub struct SurfaceComparison {
    a_to_b: Vec<f64>,
    b_to_a: Vec<f64>,
    normals_a: Vec<f64>,
    normals_b: Vec<f64>,
}

impl SurfaceComparison {
    pub fn new(a: &SurfaceSamples, b: &SurfaceSamples) -> Result<Self> {
        if a.points.is_empty() || b.points.is_empty() {
            return Err(NkfError::NothingToSample);
        }
        let ib = NearestNeighbors::new(&b.points)?;
        let ia = NearestNeighbors::new(&a.points)?;
        let (a_to_b, normals_a) = one_way(a, b, &ib);
        let (b_to_a, normals_b) = one_way(b, a, &ia);
        Ok(Self { a_to_b, b_to_a, normals_a, normals_b })
    }

    /// Symmetric mean of nearest-neighbour distances.
    pub fn chamfer(&self) -> f64 {
        0.5 * (mean(&self.a_to_b) + mean(&self.b_to_a))
    }

    /// Symmetric mean of signed dot products between matched normals.
    pub fn normal_consistency(&self) -> f64 {
        0.5 * (mean(&self.normals_a) + mean(&self.normals_b))
    }

    /// Same as [`normal_consistency`](Self::normal_consistency) but ignoring
    /// orientation.
    pub fn unsigned_normal_consistency(&self) -> f64 {
        let abs = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64;
        0.5 * (abs(&self.normals_a) + abs(&self.normals_b))
    }

    /// Harmonic mean of the fraction of `a` within `threshold` of `b`
    /// (precision) and of `b` within `threshold` of `a` (recall).
    pub fn f_score(&self, threshold: f64) -> f64 {
        let frac = |v: &[f64]| v.iter().filter(|&&d| d <= threshold).count() as f64 / v.len() as f64;
        let (p, r) = (frac(&self.a_to_b), frac(&self.b_to_a));
        if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn compare(a: &TriangleMesh, b: &TriangleMesh, n: usize, seed: u64) -> Result<SurfaceComparison> {
    let sa = SurfaceSamples::draw(a, n, seed)?;
    let sb = SurfaceSamples::draw(b, n, seed.wrapping_add(1))?;
    SurfaceComparison::new(&sa, &sb)
}

pub fn chamfer_l2(a: &TriangleMesh, b: &TriangleMesh, n: usize, seed: u64) -> Result<f64> {
    Ok(compare(a, b, n, seed)?.chamfer())
}

pub fn normal_consistency(a: &TriangleMesh, b: &TriangleMesh, n: usize, seed: u64) -> Result<f64> {
    Ok(compare(a, b, n, seed)?.normal_consistency())
}

pub fn f_score(a: &TriangleMesh, b: &TriangleMesh, threshold: f64, n: usize, seed: u64) -> Result<f64> {
    Ok(compare(a, b, n, seed)?.f_score(threshold))
}

/// Something that can classify points as inside or outside a shape.
pub trait Occupancy: Sync {
    fn inside(&self, points: &[Vec3]) -> Result<Vec<bool>>;
}

impl Occupancy for TriangleMesh {
    fn inside(&self, points: &[Vec3]) -> Result<Vec<bool>> {
        occupancy_labels(points, self)
    }
}

/// Inside where the field is negative.
impl Occupancy for ImplicitField {
    fn inside(&self, points: &[Vec3]) -> Result<Vec<bool>> {
        Ok(self.evaluate(points).into_iter().map(|f| f < 0.0).collect())
    }
}

/// Occupancy given by a closure.
pub struct InsideFn<F>(pub F);

impl<F: Fn(&Vec3) -> bool + Sync> Occupancy for InsideFn<F> {
    fn inside(&self, points: &[Vec3]) -> Result<Vec<bool>> {
        Ok(points.par_iter().map(|p| (self.0)(p)).collect())
    }
}

/// Uniform points in a box, reproducible from the seed.
pub fn uniform_points(domain: &Aabb, n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = domain.extent();
    (0..n)
        .map(|_| domain.min + Vec3::new(rng.gen::<f64>() * e.x, rng.gen::<f64>() * e.y, rng.gen::<f64>() * e.z))
        .collect()
}

/// Intersection over union of two occupancies estimated from `n` uniform
/// samples in `domain`. Two empty shapes count as identical.
pub fn iou(pred: &dyn Occupancy, gt: &dyn Occupancy, domain: &Aabb, n: usize, seed: u64) -> Result<f64> {
    let pts = uniform_points(domain, n, seed);
    let a = pred.inside(&pts)?;
    let b = gt.inside(&pts)?;
    let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// All four metrics plus the sampling settings that produced them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub iou: f64,
    pub chamfer_l2: f64,
    pub normal_consistency: f64,
    pub f_score: f64,
    pub f_score_threshold: f64,
    pub surface_samples: usize,
    pub volume_samples: usize,
    pub seed: u64,
}

impl MetricReport {
    /// Compares a predicted mesh (and optionally a separate occupancy for
    /// it, such as the implicit field) with a ground-truth mesh.
    pub fn compute(
        pred: &TriangleMesh,
        pred_occupancy: Option<&dyn Occupancy>,
        gt: &TriangleMesh,
        samples: usize,
        seed: u64,
    ) -> Result<Self> {
        let cmp = compare(pred, gt, samples, seed)?;
        let (lo, hi) = gt.bounds();
        let mut domain = Aabb::new(lo, hi);
        if !pred.is_empty() {
            let (plo, phi) = pred.bounds();
            domain = domain.union(&Aabb::new(plo, phi));
        }
        let domain = domain.padded(0.05);
        let iou = iou(pred_occupancy.unwrap_or(pred), gt, &domain, samples, seed.wrapping_add(2))?;
        Ok(Self {
            iou,
            chamfer_l2: cmp.chamfer(),
            normal_consistency: cmp.normal_consistency(),
            f_score: cmp.f_score(DEFAULT_F_THRESHOLD),
            f_score_threshold: DEFAULT_F_THRESHOLD,
            surface_samples: samples,
            volume_samples: samples,
            seed,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report fields are plain numbers")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::tests::geodesic_sphere;

    fn patch(z: f64, half: f64) -> TriangleMesh {
        let v = vec![
            Vec3::new(-half, -half, z),
            Vec3::new(half, -half, z),
            Vec3::new(half, half, z),
            Vec3::new(-half, half, z),
        ];
        TriangleMesh::new(v, vec![[0, 1, 2], [0, 2, 3]]).unwrap()
    }

    fn cube(lo: Vec3, hi: Vec3) -> TriangleMesh {
        let v: Vec<Vec3> = (0..8)
            .map(|c| Vec3::new(if c & 1 == 0 { lo.x } else { hi.x }, if c & 2 == 0 { lo.y } else { hi.y }, if c & 4 == 0 { lo.z } else { hi.z }))
            .collect();
        // outward winding for corner index bits (x=1, y=2, z=4)
        let faces = [
            [0, 2, 3, 1],
            [4, 5, 7, 6],
            [0, 1, 5, 4],
            [2, 6, 7, 3],
            [0, 4, 6, 2],
            [1, 3, 7, 5],
        ];
        let mut t = Vec::new();
        for f in faces {
            t.push([f[0], f[1], f[2]]);
            t.push([f[0], f[2], f[3]]);
        }
        TriangleMesh::new(v, t).unwrap()
    }

    #[test]
    fn grid_search_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sphere = geodesic_sphere(0.4, 3);
        let (pts, _) = sphere.sample_surface(2000, &mut rng).unwrap();
        let nn = NearestNeighbors::new(&pts).unwrap();
        for _ in 0..2000 {
            let q = Vec3::new(rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7));
            let (i, d) = nn.nearest(&q);
            let (j, e) = brute_force_nearest(&pts, &q);
            assert_eq!(d, e);
            assert_eq!((pts[i] - q).norm(), (pts[j] - q).norm());
        }
    }

    #[test]
    fn self_comparison() {
        let s = geodesic_sphere(0.4, 3);
        let a = SurfaceSamples::draw(&s, 5000, 3).unwrap();
        let cmp = SurfaceComparison::new(&a, &a).unwrap();
        assert_eq!(cmp.chamfer(), 0.0);
        assert!((1.0 - cmp.normal_consistency()) <= 1e-6);
        assert_eq!(cmp.f_score(0.01), 1.0);
    }

    #[test]
    fn parallel_planes_are_thickness_apart() {
        let t = 0.02;
        let c = chamfer_l2(&patch(0.0, 1.0), &patch(t, 1.0), 20_000, 4).unwrap();
        assert!((c - t).abs() < 0.1 * t, "{c}");
        assert_eq!(f_score(&patch(0.0, 0.5), &patch(5.0, 0.5), 0.01, 2000, 4).unwrap(), 0.0);
    }

    #[test]
    fn flipped_plane_has_negative_consistency() {
        let p = patch(0.0, 0.5);
        let nc = normal_consistency(&p, &p.flipped(), 2000, 5).unwrap();
        assert!((nc + 1.0).abs() < 1e-12);
    }

    #[test]
    fn concentric_spheres_agree_in_normals() {
        let a = geodesic_sphere(1.0, 4);
        let b = geodesic_sphere(1.01, 4);
        assert!(normal_consistency(&a, &b, 20_000, 6).unwrap() >= 0.999);
    }

    #[test]
    fn symmetric_under_argument_swap() {
        let a = geodesic_sphere(0.4, 3);
        let b = cube(Vec3::repeat(-0.3), Vec3::repeat(0.3));
        let sa = SurfaceSamples::draw(&a, 3000, 7).unwrap();
        let sb = SurfaceSamples::draw(&b, 3000, 8).unwrap();
        let ab = SurfaceComparison::new(&sa, &sb).unwrap();
        let ba = SurfaceComparison::new(&sb, &sa).unwrap();
        assert_eq!(ab.chamfer(), ba.chamfer());
        assert_eq!(ab.normal_consistency(), ba.normal_consistency());
        assert_eq!(ab.f_score(0.01), ba.f_score(0.01));
    }

    #[test]
    fn f_score_of_half_overlapping_patches() {
        // A covers [0,2]x[0,1], B covers [1,3]x[0,1] on the same plane; with
        // dense samples the precision and recall are both about 1/2
        let a = TriangleMesh::new(
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0), Vec3::new(2.0, 1.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        let b = a.map_vertices(|v| v + Vec3::new(1.0, 0.0, 0.0));
        let sa = SurfaceSamples::draw(&a, 4000, 9).unwrap();
        let sb = SurfaceSamples::draw(&b, 4000, 10).unwrap();
        let cmp = SurfaceComparison::new(&sa, &sb).unwrap();
        // brute-force precision / recall
        let within = |from: &[Vec3], to: &[Vec3]| {
            from.iter().filter(|p| brute_force_nearest(to, p).1 <= 0.05).count() as f64 / from.len() as f64
        };
        let (p, r) = (within(&sa.points, &sb.points), within(&sb.points, &sa.points));
        let oracle = 2.0 * p * r / (p + r);
        assert!((cmp.f_score(0.05) - oracle).abs() < 1e-12);
        assert!((oracle - 0.5).abs() < 0.05);
    }

    #[test]
    fn iou_examples() {
        let dom = Aabb::centered_cube(1.5);
        let a = cube(Vec3::new(-0.5, -0.5, -0.5), Vec3::new(0.5, 0.5, 0.5));
        let b = cube(Vec3::new(0.0, -0.5, -0.5), Vec3::new(1.0, 0.5, 0.5));
        let same = iou(&a, &a, &dom, 100_000, 1).unwrap();
        assert!((1.0 - same) <= 0.005);
        let half = iou(&a, &b, &dom, 100_000, 1).unwrap();
        assert!((half - 1.0 / 3.0).abs() <= 0.01, "{half}");
        let far = cube(Vec3::new(1.0, 1.0, 1.0), Vec3::new(1.4, 1.4, 1.4));
        assert_eq!(iou(&a, &far, &dom, 20_000, 1).unwrap(), 0.0);
    }

    #[test]
    fn empty_mesh_has_nothing_to_sample() {
        let e = TriangleMesh::default();
        let s = geodesic_sphere(0.4, 2);
        assert!(matches!(chamfer_l2(&e, &s, 100, 1), Err(NkfError::NothingToSample)));
    }

    #[test]
    fn report_serializes_in_fixed_order() {
        let s = geodesic_sphere(0.4, 3);
        let r = MetricReport::compute(&s, None, &s, 5000, 11).unwrap();
        let json = r.to_json();
        let keys = ["iou", "chamfer_l2", "normal_consistency", "f_score", "f_score_threshold", "surface_samples", "volume_samples", "seed"];
        let mut last = 0;
        for k in keys {
            let at = json.find(&format!("\"{k}\"")).unwrap();
            assert!(at >= last);
            last = at;
        }
        assert!(r.iou > 0.99);
        assert!(r.chamfer_l2 < 0.01);
    }

    #[test]
    fn metrics_are_rigidly_invariant() {
        let a = geodesic_sphere(0.35, 3);
        let b = cube(Vec3::repeat(-0.3), Vec3::repeat(0.3));
        let rot = nalgebra::Rotation3::from_euler_angles(0.3, -0.7, 1.1);
        let shift = Vec3::new(0.2, -0.1, 0.05);
        let move_it = |m: &TriangleMesh| m.map_vertices(|v| rot * v + shift);
        let r1 = MetricReport::compute(&a, None, &b, 20_000, 3).unwrap();
        let r2 = MetricReport::compute(&move_it(&a), None, &move_it(&b), 20_000, 3).unwrap();
        assert!((r1.chamfer_l2 - r2.chamfer_l2).abs() < 0.01);
        assert!((r1.normal_consistency - r2.normal_consistency).abs() < 0.01);
        assert!((r1.f_score - r2.f_score).abs() < 0.01);
        assert!((r1.iou - r2.iou).abs() < 0.01 + 0.0);
    }
}

//! Triangle meshes: surface sampling, watertightness and inside/outside
//! classification by ray parity.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{NkfError, Result};
use crate::geometry::{bounds_of, Vec3};

/// Indexed triangle mesh with per-vertex normals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub normals: Vec<Vec3>,
}

impl TriangleMesh {
    /// Builds a mesh and derives area-weighted vertex normals from the winding.
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len() as u32;
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(NkfError::InvalidInput(format!(
                "triangle {t:?} indexes past {n} vertices"
            )));
        }
        let mut mesh = Self { vertices, triangles, normals: Vec::new() };
        mesh.recompute_normals();
        Ok(mesh)
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn recompute_normals(&mut self) {
        let mut acc = vec![Vec3::zeros(); self.vertices.len()];
        for t in &self.triangles {
            // unnormalized cross product weights by area
            let n = self.face_cross(t);
            for &i in t {
                acc[i as usize] += n;
            }
        }
        self.normals = acc
            .into_iter()
            .map(|n| {
                let len = n.norm();
                if len > 0.0 { n / len } else { n }
            })
            .collect();
    }

    fn face_cross(&self, t: &[u32; 3]) -> Vec3 {
        let a = self.vertices[t[0] as usize];
        let b = self.vertices[t[1] as usize];
        let c = self.vertices[t[2] as usize];
        (b - a).cross(&(c - a))
    }

    pub fn triangle_area(&self, i: usize) -> f64 {
        0.5 * self.face_cross(&self.triangles[i]).norm()
    }

    /// Unit normal implied by the winding of triangle `i`.
    pub fn face_normal(&self, i: usize) -> Vec3 {
        let n = self.face_cross(&self.triangles[i]);
        let len = n.norm();
        if len > 0.0 { n / len } else { n }
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|i| self.triangle_area(i)).sum()
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        bounds_of(&self.vertices)
    }

    /// Applies `f` to every vertex and rebuilds normals.
    pub fn map_vertices(&self, f: impl Fn(&Vec3) -> Vec3) -> TriangleMesh {
        let mut out = TriangleMesh {
            vertices: self.vertices.iter().map(f).collect(),
            triangles: self.triangles.clone(),
            normals: Vec::new(),
        };
        out.recompute_normals();
        out
    }

    /// Reverses the winding (and therefore every normal).
    pub fn flipped(&self) -> TriangleMesh {
        let mut out = self.clone();
        for t in &mut out.triangles {
            t.swap(1, 2);
        }
        out.recompute_normals();
        out
    }

    /// Number of undirected edges not shared by exactly two triangles.
    pub fn boundary_edge_count(&self) -> usize {
        let mut counts: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        counts.values().filter(|&&c| c != 2).count()
    }

    pub fn check_watertight(&self) -> Result<()> {
        if self.triangles.is_empty() {
            return Err(NkfError::OpenSurface(0));
        }
        match self.boundary_edge_count() {
            0 => Ok(()),
            bad => Err(NkfError::OpenSurface(bad)),
        }
    }

    /// Draws `n` area-weighted surface samples with their face normals.
    pub fn sample_surface<R: Rng>(&self, n: usize, rng: &mut R) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
        let mut cdf = Vec::with_capacity(self.triangles.len());
        let mut total = 0.0;
        for i in 0..self.triangles.len() {
            total += self.triangle_area(i);
            cdf.push(total);
        }
        if self.triangles.is_empty() || !(total > 0.0) {
            return Err(NkfError::NothingToSample);
        }
        let mut points = Vec::with_capacity(n);
        let mut normals = Vec::with_capacity(n);
        for _ in 0..n {
            let r = rng.gen::<f64>() * total;
            let i = cdf.partition_point(|&c| c <= r).min(cdf.len() - 1);
            let t = &self.triangles[i];
            let (a, b, c) = (
                self.vertices[t[0] as usize],
                self.vertices[t[1] as usize],
                self.vertices[t[2] as usize],
            );
            let s = rng.gen::<f64>().sqrt();
            let u = rng.gen::<f64>();
            points.push(a * (1.0 - s) + b * (s * (1.0 - u)) + c * (s * u));
            normals.push(self.face_normal(i));
        }
        Ok((points, normals))
    }

    /// Merges vertices with bit-identical coordinates and drops triangles
    /// that collapse or have (near) zero area.
    pub fn weld_and_clean(&mut self, min_area: f64) {
        let mut remap = Vec::with_capacity(self.vertices.len());
        let mut index: HashMap<[u64; 3], u32> = HashMap::new();
        let mut verts = Vec::new();
        for v in &self.vertices {
            let key = [v.x.to_bits(), v.y.to_bits(), v.z.to_bits()];
            let id = *index.entry(key).or_insert_with(|| {
                verts.push(*v);
                (verts.len() - 1) as u32
            });
            remap.push(id);
        }
        let mut tris = Vec::with_capacity(self.triangles.len());
        for t in &self.triangles {
            let t = [remap[t[0] as usize], remap[t[1] as usize], remap[t[2] as usize]];
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                continue;
            }
            tris.push(t);
        }
        self.vertices = verts;
        self.triangles = tris;
        let keep: Vec<bool> = (0..self.triangles.len())
            .map(|i| self.triangle_area(i) > min_area)
            .collect();
        let mut k = keep.iter();
        self.triangles.retain(|_| *k.next().unwrap());
        self.recompute_normals();
    }
}

/// Ray-parity inside test against a closed mesh, accelerated by binning
/// triangles over the plane orthogonal to the ray (+x).
#[derive(Debug, Clone)]
pub struct MeshOccupancy<'a> {
    mesh: &'a TriangleMesh,
    lo: [f64; 2],
    cell: [f64; 2],
    bins: usize,
    cells: Vec<Vec<u32>>,
}

fn orient(p0: [f64; 2], p1: [f64; 2], q: [f64; 2]) -> f64 {
    (p1[0] - p0[0]) * (q[1] - p0[1]) - (p1[1] - p0[1]) * (q[0] - p0[0])
}

/// Edge function evaluated with canonically ordered endpoints so that the
/// two triangles sharing an edge see exactly negated values.
fn edge_fn(p0: [f64; 2], p1: [f64; 2], q: [f64; 2]) -> f64 {
    if (p0[0], p0[1]) <= (p1[0], p1[1]) {
        orient(p0, p1, q)
    } else {
        -orient(p1, p0, q)
    }
}

/// Tie-break for queries exactly on an edge: each undirected edge belongs
/// to exactly one of its two orientations.
fn owns_edge(p0: [f64; 2], p1: [f64; 2]) -> bool {
    let d = [p1[0] - p0[0], p1[1] - p0[1]];
    d[1] > 0.0 || (d[1] == 0.0 && d[0] < 0.0)
}

impl<'a> MeshOccupancy<'a> {
    pub fn new(mesh: &'a TriangleMesh) -> Result<Self> {
        mesh.check_watertight()?;
        let (lo, hi) = mesh.bounds();
        let bins = ((mesh.triangles.len() as f64).sqrt() as usize).clamp(1, 256);
        let lo2 = [lo.y, lo.z];
        let span = [(hi.y - lo.y).max(1e-12), (hi.z - lo.z).max(1e-12)];
        let cell = [span[0] / bins as f64, span[1] / bins as f64];
        let mut cells = vec![Vec::new(); bins * bins];
        let bin = |v: f64, axis: usize| -> usize {
            (((v - lo2[axis]) / cell[axis]).floor().max(0.0) as usize).min(bins - 1)
        };
        for (ti, t) in mesh.triangles.iter().enumerate() {
            let vs = t.map(|i| mesh.vertices[i as usize]);
            let (ymin, ymax) = (vs[0].y.min(vs[1].y).min(vs[2].y), vs[0].y.max(vs[1].y).max(vs[2].y));
            let (zmin, zmax) = (vs[0].z.min(vs[1].z).min(vs[2].z), vs[0].z.max(vs[1].z).max(vs[2].z));
            for by in bin(ymin, 0)..=bin(ymax, 0) {
                for bz in bin(zmin, 1)..=bin(zmax, 1) {
                    cells[by * bins + bz].push(ti as u32);
                }
            }
        }
        Ok(Self { mesh, lo: lo2, cell, bins, cells })
    }

    /// `true` strictly inside; points on the surface count as outside.
    pub fn is_inside(&self, q: &Vec3) -> bool {
        let fy = (q.y - self.lo[0]) / self.cell[0];
        let fz = (q.z - self.lo[1]) / self.cell[1];
        let b = self.bins as f64;
        if !(fy >= 0.0 && fz >= 0.0 && fy <= b && fz <= b) {
            return false;
        }
        let by = (fy as usize).min(self.bins - 1);
        let bz = (fz as usize).min(self.bins - 1);
        let q2 = [q.y, q.z];
        let mut crossings = 0usize;
        for &ti in &self.cells[by * self.bins + bz] {
            let t = &self.mesh.triangles[ti as usize];
            let mut v = t.map(|i| self.mesh.vertices[i as usize]);
            let mut p = v.map(|p| [p.y, p.z]);
            let area = orient(p[0], p[1], p[2]);
            if area == 0.0 {
                continue;
            }
            if area < 0.0 {
                p.swap(1, 2);
                v.swap(1, 2);
            }
            let mut w = [0.0; 3];
            let mut covered = true;
            for k in 0..3 {
                let (a, b) = (p[(k + 1) % 3], p[(k + 2) % 3]);
                let e = edge_fn(a, b, q2);
                if e < 0.0 || (e == 0.0 && !owns_edge(a, b)) {
                    covered = false;
                    break;
                }
                w[k] = e;
            }
            if !covered {
                continue;
            }
            let sum = w[0] + w[1] + w[2];
            let x_hit = (w[0] * v[0].x + w[1] * v[1].x + w[2] * v[2].x) / sum;
            if x_hit == q.x {
                return false;
            }
            if x_hit > q.x {
                crossings += 1;
            }
        }
        crossings % 2 == 1
    }
}

/// Inside (1) / outside (0) labels of `queries` against a closed mesh.
pub fn occupancy_labels(queries: &[Vec3], mesh: &TriangleMesh) -> Result<Vec<bool>> {
    let occ = MeshOccupancy::new(mesh)?;
    Ok(queries.par_iter().map(|q| occ.is_inside(q)).collect())
}

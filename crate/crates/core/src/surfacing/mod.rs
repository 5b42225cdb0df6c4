//! Dense sampling of an implicit field and marching-cubes extraction of its
//! zero level set.

mod mc_tables;

use rayon::prelude::*;

use crate::error::{NkfError, Result};
use crate::geometry::{Aabb, Vec3};
use crate::krr::ImplicitField;
use crate::mesh::TriangleMesh;
use mc_tables::TRIANGLES;

/// Default evaluation box for normalized data: the unit cube plus a 5% margin.
pub fn default_domain() -> Aabb {
    Aabb::centered_cube(0.55)
}

/// Samples of a scalar function at the `R³` cell centers of a box.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    resolution: usize,
    domain: Aabb,
    values: Vec<f64>,
}

impl ScalarGrid {
    /// `values` are ordered with z fastest: index `(i·R + j)·R + k`.
    pub fn new(resolution: usize, domain: Aabb, values: Vec<f64>) -> Result<Self> {
        let n = resolution.pow(3);
        if values.len() != n {
            return Err(NkfError::DimensionMismatch { expected: n, actual: values.len() });
        }
        if resolution == 0 || !(domain.extent().min() > 0.0) {
            return Err(NkfError::InvalidInput("grid needs a positive resolution and a non-empty box".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(NkfError::NonFinite(format!("grid value {i}")));
        }
        Ok(Self { resolution, domain, values })
    }

    /// Samples `f` at every cell center.
    pub fn from_fn(resolution: usize, domain: Aabb, f: impl Fn(&Vec3) -> f64 + Sync + Send) -> Result<Self> {
        let centers = cell_centers(resolution, &domain);
        let values = centers.par_iter().map(f).collect();
        Self::new(resolution, domain, values)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn domain(&self) -> &Aabb {
        &self.domain
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[(i * self.resolution + j) * self.resolution + k]
    }

    /// Edge length of a cell along each axis.
    pub fn spacing(&self) -> Vec3 {
        self.domain.extent() / self.resolution as f64
    }

    pub fn position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let h = self.spacing();
        self.domain.min + Vec3::new((i as f64 + 0.5) * h.x, (j as f64 + 0.5) * h.y, (k as f64 + 0.5) * h.z)
    }
}

/// Cell centers of an `R³` grid over `domain`, z fastest.
pub fn cell_centers(resolution: usize, domain: &Aabb) -> Vec<Vec3> {
    let h = domain.extent() / resolution as f64;
    let mut out = Vec::with_capacity(resolution.pow(3));
    for i in 0..resolution {
        for j in 0..resolution {
            for k in 0..resolution {
                out.push(
                    domain.min + Vec3::new((i as f64 + 0.5) * h.x, (j as f64 + 0.5) * h.y, (k as f64 + 0.5) * h.z),
                );
            }
        }
    }
    out
}

/// Evaluates a solved field at the cell centers of an `R³` grid.
pub fn evaluate_grid(field: &ImplicitField, resolution: usize, domain: Aabb) -> Result<ScalarGrid> {
    let centers = cell_centers(resolution, &domain);
    ScalarGrid::new(resolution, domain, field.evaluate(&centers))
}

/// Cube corners in table order as (dx, dy, dz).
const CORNERS: [[usize; 3]; 8] =
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]];

/// Cube edges in table order as (lower corner, axis).
const EDGES: [([usize; 3], usize); 12] = [
    ([0, 0, 0], 0),
    ([1, 0, 0], 1),
    ([0, 1, 0], 0),
    ([0, 0, 0], 1),
    ([0, 0, 1], 0),
    ([1, 0, 1], 1),
    ([0, 1, 1], 0),
    ([0, 0, 1], 1),
    ([0, 0, 0], 2),
    ([1, 0, 0], 2),
    ([1, 1, 0], 2),
    ([0, 1, 0], 2),
];

/// Extracts the `iso` level set of a grid as a triangle mesh whose normals
/// point toward larger values (outside, for fields positive outside).
///
/// Samples exactly equal to `iso` are treated as lying marginally above
/// it, so every vertex sits strictly inside its edge. Vertices are shared
/// by edge, which makes the surface closed wherever it does not cross the
/// grid boundary. No crossing gives an empty mesh.
pub fn marching_cubes(grid: &ScalarGrid, iso: f64) -> Result<TriangleMesh> {
    let r = grid.resolution;
    if r < 2 {
        return Ok(TriangleMesh::default());
    }
    let scale = grid.values.iter().fold(0.0f64, |a, v| a.max((v - iso).abs()));
    let nudge = (scale * 1e-12).max(f64::MIN_POSITIVE);
    let value = |i: usize, j: usize, k: usize| {
        let v = grid.value(i, j, k) - iso;
        if v == 0.0 { nudge } else { v }
    };
    let mut edge_vertex: Vec<u32> = vec![u32::MAX; r * r * r * 3];
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    for i in 0..r - 1 {
        for j in 0..r - 1 {
            for k in 0..r - 1 {
                let mut case = 0usize;
                let mut vals = [0.0; 8];
                for (c, d) in CORNERS.iter().enumerate() {
                    vals[c] = value(i + d[0], j + d[1], k + d[2]);
                    if vals[c] < 0.0 {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let row = &TRIANGLES[case];
                let mut t = 0;
                while t < 16 && row[t] >= 0 {
                    let mut tri = [0u32; 3];
                    for (slot, &e) in tri.iter_mut().zip(&row[t..t + 3]) {
                        let (base, axis) = EDGES[e as usize];
                        let a = [i + base[0], j + base[1], k + base[2]];
                        let id = ((a[0] * r + a[1]) * r + a[2]) * 3 + axis;
                        if edge_vertex[id] == u32::MAX {
                            let mut b = a;
                            b[axis] += 1;
                            let va = value(a[0], a[1], a[2]);
                            let vb = value(b[0], b[1], b[2]);
                            let s = va / (va - vb);
                            let pa = grid.position(a[0], a[1], a[2]);
                            let pb = grid.position(b[0], b[1], b[2]);
                            vertices.push(pa + (pb - pa) * s);
                            edge_vertex[id] = (vertices.len() - 1) as u32;
                        }
                        *slot = edge_vertex[id];
                    }
                    // the table winds triangles with normals toward the
                    // negative side; swap to face positive values
                    triangles.push([tri[0], tri[2], tri[1]]);
                    t += 3;
                }
            }
        }
    }
    let mut mesh = TriangleMesh::new(vertices, triangles)?;
    mesh.weld_and_clean(0.0);
    Ok(mesh)
}

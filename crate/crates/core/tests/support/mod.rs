#![allow(dead_code)]

pub mod dd;

use nkf::{OrientedPointCloud, Vec3};

/// Fibonacci-lattice samples of a sphere with outward normals.
pub fn sphere_cloud(n: usize, radius: f64, center: Vec3) -> OrientedPointCloud {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let (mut points, mut normals) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - y * y).sqrt();
        let t = golden * i as f64;
        let dir = Vec3::new(r * t.cos(), y, r * t.sin());
        points.push(center + dir * radius);
        normals.push(dir);
    }
    OrientedPointCloud::new(points, normals).unwrap()
}

use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Random oriented samples of an axis-aligned ellipsoid inside the
/// normalized cube.
pub fn ellipsoid_cloud<R: Rng>(n: usize, rng: &mut R) -> OrientedPointCloud {
    let radii = Vec3::new(rng.gen_range(0.2..0.45), rng.gen_range(0.2..0.45), rng.gen_range(0.2..0.45));
    let (mut points, mut normals) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let d = loop {
            let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let l = v.norm();
            if l > 0.1 && l <= 1.0 {
                break v / l;
            }
        };
        points.push(d.component_mul(&radii));
        normals.push(d.component_div(&radii).component_div(&radii));
    }
    OrientedPointCloud::new(points, normals).unwrap()
}

/// Kernel ridge regression through a route independent of the library's
/// Cholesky path: SVD least squares of `[G; √λ G^½] α ≈ [y; 0]`, whose
/// normal equations `G(G + λI)α = Gy` have the ridge solution.
pub fn ridge_oracle(g: &DMatrix<f64>, y: &[f64], lambda: f64) -> DVector<f64> {
    let n = g.nrows();
    let y = DVector::from_column_slice(y);
    if lambda == 0.0 {
        return g.clone().svd(true, true).solve(&y, 1e-14 * g.norm()).unwrap();
    }
    let eig = g.clone().symmetric_eigen();
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(|e| e.max(0.0).sqrt()));
    let half = &eig.eigenvectors * root * eig.eigenvectors.transpose();
    let mut a = DMatrix::zeros(2 * n, n);
    a.view_mut((0, 0), (n, n)).copy_from(g);
    a.view_mut((n, 0), (n, n)).copy_from(&(half * lambda.sqrt()));
    let mut b = DVector::zeros(2 * n);
    b.rows_mut(0, n).copy_from(&y);
    a.svd(true, true).solve(&b, 0.0).unwrap()
}

/// Subdivided icosahedron with every vertex on the sphere.
pub fn icosphere(levels: usize, radius: f64, center: Vec3) -> nkf::TriangleMesh {
    use std::collections::HashMap;
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Vec3> = [
        [-1.0, t, 0.0], [1.0, t, 0.0], [-1.0, -t, 0.0], [1.0, -t, 0.0],
        [0.0, -1.0, t], [0.0, 1.0, t], [0.0, -1.0, -t], [0.0, 1.0, -t],
        [t, 0.0, -1.0], [t, 0.0, 1.0], [-t, 0.0, -1.0], [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|p| Vec3::from(*p).normalize())
    .collect();
    let mut f: Vec<[u32; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..levels {
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut midpoint = |a: u32, b: u32, v: &mut Vec<Vec3>| {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                v.push(((v[a as usize] + v[b as usize]) * 0.5).normalize());
                (v.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(f.len() * 4);
        for [a, b, c] in f {
            let (ab, bc, ca) = (midpoint(a, b, &mut v), midpoint(b, c, &mut v), midpoint(c, a, &mut v));
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        f = next;
    }
    nkf::TriangleMesh::new(v.iter().map(|p| center + p * radius).collect(), f).unwrap()
}

/// Sampled torus around the z axis with outward normals.
pub fn torus_cloud(n: usize, major: f64, minor: f64) -> OrientedPointCloud {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let (mut points, mut normals) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let u = std::f64::consts::TAU * (i as f64 + 0.5) / n as f64;
        let v = golden * i as f64 * 7.0;
        let ring = Vec3::new(u.cos(), u.sin(), 0.0);
        let normal = ring * v.cos() + Vec3::z() * v.sin();
        points.push(ring * major + normal * minor);
        normals.push(normal);
    }
    OrientedPointCloud::new(points, normals).unwrap()
}

/// Parametric torus around the z axis with outward winding.
pub fn torus_mesh(major: f64, minor: f64, nu: usize, nv: usize) -> nkf::TriangleMesh {
    let tau = std::f64::consts::TAU;
    let mut vertices = Vec::with_capacity(nu * nv);
    for i in 0..nu {
        let u = tau * i as f64 / nu as f64;
        let ring = Vec3::new(u.cos(), u.sin(), 0.0);
        for j in 0..nv {
            let v = tau * j as f64 / nv as f64;
            vertices.push(ring * (major + minor * v.cos()) + Vec3::z() * (minor * v.sin()));
        }
    }
    let id = |i: usize, j: usize| ((i % nu) * nv + j % nv) as u32;
    let mut triangles = Vec::with_capacity(2 * nu * nv);
    for i in 0..nu {
        for j in 0..nv {
            triangles.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            triangles.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    nkf::TriangleMesh::new(vertices, triangles).unwrap()
}

/// Signed volume from the divergence theorem; positive for outward winding.
pub fn signed_volume(m: &nkf::TriangleMesh) -> f64 {
    m.triangles
        .iter()
        .map(|t| {
            let [a, b, c] = t.map(|i| m.vertices[i as usize]);
            a.dot(&b.cross(&c)) / 6.0
        })
        .sum()
}

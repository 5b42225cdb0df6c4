mod support;

use nkf::metrics::{chamfer_l2, iou, InsideFn};
use nkf::pipeline::{reconstruct, ReconstructOptions};
use nkf::geometry::Aabb;
use nkf::{OrientedPointCloud, Vec3};

fn opts(resolution: usize) -> ReconstructOptions {
    ReconstructOptions { resolution, ..Default::default() }
}

#[test]
fn icosphere_is_closed_and_round() {
    let m = support::icosphere(3, 0.4, Vec3::zeros());
    m.check_watertight().unwrap();
    assert!(m.vertices.iter().all(|v| (v.norm() - 0.4).abs() < 1e-15));
}

#[test]
fn sphere_matches_the_analytic_ball() {
    let cloud = support::sphere_cloud(500, 0.4, Vec3::zeros());
    let rec = reconstruct(&cloud, &opts(40)).unwrap();
    rec.mesh.check_watertight().unwrap();
    let reference = support::icosphere(5, 0.4, Vec3::zeros());
    let cd = chamfer_l2(&rec.mesh, &reference, 50_000, 1).unwrap();
    let ball = InsideFn(|p: &Vec3| p.norm() < 0.4);
    let v = iou(&rec, &ball, &Aabb::centered_cube(0.5), 50_000, 2).unwrap();
    assert!(cd < 0.01 && v > 0.95, "chamfer {cd} iou {v}");
}

#[test]
fn torus_genus_is_kept() {
    let cloud = support::torus_cloud(800, 0.3, 0.1);
    let rec = reconstruct(&cloud, &opts(40)).unwrap();
    rec.mesh.check_watertight().unwrap();
    let v = rec.evaluate(&[Vec3::zeros(), Vec3::new(0.3, 0.0, 0.0)]);
    assert!(v[0] > 0.0 && v[1] < 0.0, "{v:?}");
    // Euler characteristic of a torus
    let edges = rec.mesh.triangles.len() * 3 / 2;
    let chi = rec.mesh.vertices.len() as i64 - edges as i64 + rec.mesh.triangles.len() as i64;
    assert_eq!(chi, 0);
}

#[test]
fn reconstruction_is_deterministic() {
    let cloud = support::sphere_cloud(150, 1.0, Vec3::new(1.0, 2.0, 3.0));
    let a = reconstruct(&cloud, &opts(24)).unwrap();
    let b = reconstruct(&cloud, &opts(24)).unwrap();
    assert_eq!(a.mesh, b.mesh);
}

#[test]
fn similarity_transforms_commute_with_reconstruction() {
    let cloud = support::torus_cloud(300, 0.3, 0.12);
    let (scale, shift) = (7.5, Vec3::new(-3.0, 10.0, 0.25));
    let moved = OrientedPointCloud::new(cloud.points().iter().map(|p| p * scale + shift).collect(), cloud.normals().to_vec()).unwrap();
    let a = reconstruct(&cloud, &opts(24)).unwrap();
    let b = reconstruct(&moved, &opts(24)).unwrap();
    assert_eq!(a.mesh.triangles, b.mesh.triangles);
    let worst = a.mesh.vertices.iter().zip(&b.mesh.vertices).map(|(p, q)| (p * scale + shift - q).norm()).fold(0.0, f64::max);
    assert!(worst < 1e-9 * scale, "{worst}");
}

#[test]
fn regularization_smooths_noise() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let clean = support::sphere_cloud(300, 0.4, Vec3::zeros());
    let noisy = OrientedPointCloud::new(
        clean.points().iter().map(|p| p + Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * 0.01).collect(),
        clean.normals().to_vec(),
    )
    .unwrap();
    let reference = support::icosphere(5, 0.4, Vec3::zeros());
    let cd = |lambda| {
        let rec = reconstruct(&noisy, &ReconstructOptions { lambda, resolution: 32, ..Default::default() }).unwrap();
        let area: f64 = rec.mesh.surface_area();
        (chamfer_l2(&rec.mesh, &reference, 30_000, 4).unwrap(), area)
    };
    let (rough, rough_area) = cd(0.0);
    let (smooth, smooth_area) = cd(1e-2);
    assert!(smooth <= rough * 1.05, "{smooth} vs {rough}");
    assert!(smooth_area < rough_area, "{smooth_area} vs {rough_area}");
}

#[test]
fn reference_meshes_are_outward_and_closed() {
    let t = support::torus_mesh(0.3, 0.1, 96, 48);
    t.check_watertight().unwrap();
    let exact = 2.0 * std::f64::consts::PI.powi(2) * 0.3 * 0.01;
    assert!((support::signed_volume(&t) - exact).abs() < 0.01 * exact);
    let s = support::icosphere(4, 0.4, Vec3::zeros());
    let exact = 4.0 / 3.0 * std::f64::consts::PI * 0.064;
    assert!((support::signed_volume(&s) - exact).abs() < 0.01 * exact);
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::kernel::{k_learned, k_ns, FeatureAugmentedPoint};

fn small_config(m: usize) -> FeatureNetConfig {
    FeatureNetConfig {
        resolution: m,
        channels: 3,
        encoder_hidden: 5,
        widths: [2, 3, 4],
        head_hidden: 4,
        use_normals: true,
    }
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, half: f64) -> OrientedPointCloud {
    let pts: Vec<Vec3> = (0..n)
        .map(|_| Vec3::new(rng.gen_range(-half..half), rng.gen_range(-half..half), rng.gen_range(-half..half)))
        .collect();
    let nrm: Vec<Vec3> = (0..n)
        .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.1..1.0)).normalize())
        .collect();
    OrientedPointCloud::new(pts, nrm).unwrap()
}

/// Fully random parameters, including the normally zeroed layers.
fn dense_random_params(config: FeatureNetConfig, seed: u64) -> FeatureNetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = FeatureNetworkParams::zeros(config).unwrap();
    for s in p.segments_mut() {
        s.data.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    p
}

/// Plain-loop evaluation of the point encoder for one input row.
fn encoder_oracle(p: &FeatureNetworkParams, input: &[f64]) -> Vec<f64> {
    let layer = |x: &[f64], name: &str, relu: bool| -> Vec<f64> {
        let w = &p.segment(&format!("{name}.weight")).unwrap();
        let b = &p.segment(&format!("{name}.bias")).unwrap().data;
        let (fi, fo) = (w.shape[0], w.shape[1]);
        (0..fo)
            .map(|o| {
                let v = b[o] + (0..fi).map(|i| x[i] * w.data[i * fo + o]).sum::<f64>();
                if relu { v.max(0.0) } else { v }
            })
            .collect()
    };
    let h = layer(input, "encoder.0", true);
    let h = layer(&h, "encoder.1", true);
    layer(&h, "encoder.2", false)
}

#[test]
fn encode_empty_and_singleton_cells() {
    let config = small_config(4);
    let params = dense_random_params(config, 1);
    // voxel (2,1,3) center is (0.125, -0.125, 0.375)
    let p = Vec3::new(0.15, -0.1, 0.3);
    let n = Vec3::new(0.0, 0.6, 0.8);
    let cloud = OrientedPointCloud::new(vec![p], vec![n]).unwrap();
    let grid = encode(&cloud, &params).unwrap();
    let offset = [(0.15 + 0.5) * 4.0 - 2.5, (-0.1 + 0.5) * 4.0 - 1.5, (0.3 + 0.5) * 4.0 - 3.5];
    let want = encoder_oracle(&params, &[offset[0], offset[1], offset[2], 0.0, 0.6, 0.8]);
    for (g, w) in grid.cell(2, 1, 3).iter().zip(&want) {
        assert!((g - w).abs() < 1e-14);
    }
    let nonzero = grid.data().chunks(3).filter(|c| c.iter().any(|&v| v != 0.0)).count();
    assert_eq!(nonzero, 1);
    assert!(grid.cell(0, 0, 0).iter().all(|&v| v == 0.0));
}

#[test]
fn encode_is_permutation_invariant() {
    let config = small_config(4);
    let params = dense_random_params(config, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cloud = random_cloud(&mut rng, 60, 0.5);
    let mut order: Vec<usize> = (0..60).collect();
    order.reverse();
    order.swap(3, 40);
    let shuffled = cloud.select(&order).unwrap();
    assert_eq!(encode(&cloud, &params).unwrap(), encode(&shuffled, &params).unwrap());
}

#[test]
fn zero_parameters_and_zero_output_layer_give_zero_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cloud = random_cloud(&mut rng, 30, 0.45);
    let config = small_config(8);
    let zeros = FeatureNetworkParams::zeros(config).unwrap();
    let f = FeatureFunction::build(&cloud, &zeros).unwrap();
    assert!(f.grid().data().iter().all(|&v| v == 0.0));
    let mut init = FeatureNetworkParams::init(config, &mut rng).unwrap();
    let f = FeatureFunction::build(&cloud, &init).unwrap();
    assert!(f.grid().data().iter().any(|&v| v != 0.0));
    for s in init.segments_mut().iter_mut().filter(|s| s.name.starts_with("backbone.out.")) {
        s.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let f = FeatureFunction::build(&cloud, &init).unwrap();
    assert!(f.grid().data().iter().all(|&v| v == 0.0));
    let out = backbone(&VoxelFeatureGrid::zeros(8, 3), &zeros).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_features_reduce_learned_kernel_to_plain() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cloud = random_cloud(&mut rng, 20, 0.45);
    let f = FeatureFunction::build(&cloud, &FeatureNetworkParams::zeros(small_config(8)).unwrap()).unwrap();
    for _ in 0..20 {
        let x = Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
        let z = Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
        let px = FeatureAugmentedPoint::new(x, f.feature(&x));
        let pz = FeatureAugmentedPoint::new(z, f.feature(&z));
        assert_eq!(k_learned(&px, &pz).unwrap(), k_ns(&x, &z));
    }
}

#[test]
fn backbone_requires_divisible_resolution() {
    let mut c = small_config(6);
    assert!(matches!(c.validate(), Err(NkfError::ResolutionNotDivisible(6))));
    c.resolution = 8;
    assert!(c.validate().is_ok());
}

/// Dense input grid with features only in the listed voxels.
fn sparse_grid(m: usize, ch: usize, cells: &[((usize, usize, usize), f64)]) -> VoxelFeatureGrid {
    let mut data = vec![0.0; m * m * m * ch];
    for &((i, j, k), v) in cells {
        let at = ((i * m + j) * m + k) * ch;
        for c in 0..ch {
            data[at + c] = v * (c as f64 + 1.0);
        }
    }
    VoxelFeatureGrid::new(m, ch, data).unwrap()
}

#[test]
fn backbone_is_shift_equivariant_by_four_cells() {
    // two pooling stages make the network equivariant to shifts that are
    // multiples of 4 cells; the grid is large enough that the receptive
    // field around the occupied cells never reaches the border
    let m = 64;
    let params = dense_random_params(small_config(m), 6);
    let occupied = [((30, 31, 29), 1.0), ((31, 33, 30), -0.7), ((29, 30, 32), 0.4)];
    let shifted: Vec<_> = occupied.iter().map(|&((i, j, k), v)| ((i + 4, j, k + 4), v)).collect();
    let a = backbone(&sparse_grid(m, 3, &occupied), &params).unwrap();
    let b = backbone(&sparse_grid(m, 3, &shifted), &params).unwrap();
    let mut compared = 0;
    for i in 8..56 {
        for j in 8..56 {
            for k in 8..56 {
                let (x, y) = (a.cell(i, j, k), b.cell(i + 4, j, k + 4));
                for (p, q) in x.iter().zip(y) {
                    assert!((p - q).abs() <= 1e-12, "({i},{j},{k})");
                }
                compared += 1;
            }
        }
    }
    assert!(compared > 0);
}

#[test]
fn receptive_field_spans_seven_cells() {
    let m = 16;
    let params = dense_random_params(small_config(m), 7);
    let base = backbone(&VoxelFeatureGrid::zeros(m, 3), &params).unwrap();
    let probe = backbone(&sparse_grid(m, 3, &[((8, 8, 8), 1.0)]), &params).unwrap();
    let mut lo = [m; 3];
    let mut hi = [0; 3];
    for i in 0..m {
        for j in 0..m {
            for k in 0..m {
                let differs = base.cell(i, j, k).iter().zip(probe.cell(i, j, k)).any(|(a, b)| a != b);
                if differs {
                    for (a, v) in [i, j, k].into_iter().enumerate() {
                        lo[a] = lo[a].min(v);
                        hi[a] = hi[a].max(v);
                    }
                }
            }
        }
    }
    for a in 0..3 {
        assert!(hi[a] + 1 - lo[a] >= 7, "axis {a}: {}..={}", lo[a], hi[a]);
    }
}

#[test]
fn interpolation_examples() {
    let m = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data: Vec<f64> = (0..m * m * m * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let grid = VoxelFeatureGrid::new(m, 2, data).unwrap();
    assert_eq!(grid.interpolate(&grid.cell_center(1, 2, 3)), grid.cell(1, 2, 3));

    let constant = VoxelFeatureGrid::new(m, 2, vec![0.75; m * m * m * 2]).unwrap();
    for _ in 0..20 {
        let x = Vec3::new(rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7));
        for v in constant.interpolate(&x) {
            assert!((v - 0.75).abs() < 1e-15);
        }
    }

    let two = sparse_grid(m, 1, &[((1, 1, 1), 2.0), ((2, 1, 1), 5.0)]);
    let mid = (two.cell_center(1, 1, 1) + two.cell_center(2, 1, 1)) / 2.0;
    assert!((two.interpolate(&mid)[0] - 3.5).abs() < 1e-15);
}

#[test]
fn jacobian_matches_finite_differences_inside_cells() {
    let m = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data: Vec<f64> = (0..m * m * m * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let grid = VoxelFeatureGrid::new(m, 2, data).unwrap();
    let h = 1e-7;
    for _ in 0..50 {
        let x = Vec3::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4));
        let dir = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
        let jac = grid.jacobian(&x);
        let plus = grid.interpolate(&(x + dir * h));
        let minus = grid.interpolate(&(x - dir * h));
        for c in 0..2 {
            let fd = (plus[c] - minus[c]) / (2.0 * h);
            let analytic = jac[c][0] * dir.x + jac[c][1] * dir.y + jac[c][2] * dir.z;
            assert!((fd - analytic).abs() <= 1e-8 * analytic.abs().max(1.0), "{fd} vs {analytic}");
        }
    }
}

#[test]
fn point_weight_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let config = small_config(8);
    let init = FeatureNetworkParams::init(config, &mut rng).unwrap();
    let feats = vec![vec![0.0; 3], vec![0.3, -1.0, 2.0], vec![0.3, -1.0, 2.0]];
    assert_eq!(point_weights(&feats, &init).unwrap(), vec![0.5; 3]);

    let params = dense_random_params(config, 11);
    let w = point_weights(&feats, &params).unwrap();
    assert_eq!(w[1], w[2]);
    assert!(w.iter().all(|&v| v > 0.0 && v < 1.0));

    // raising the output bias raises every weight
    let mut higher = params.clone();
    for s in higher.segments_mut() {
        if s.name == "head.1.bias" {
            s.data[0] += 0.5;
        }
    }
    let w2 = point_weights(&feats, &higher).unwrap();
    assert!(w.iter().zip(&w2).all(|(a, b)| b > a));
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = FeatureNetworkParams::init(small_config(8), &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.nkf");
    let extra = Segment { name: format!("{OPTIMIZER_PREFIX}step"), shape: vec![1], data: vec![17.0] };
    params.save_with(&path, std::slice::from_ref(&extra)).unwrap();
    let (back, opt) = FeatureNetworkParams::load_with(&path).unwrap();
    assert_eq!(back, params);
    assert_eq!(opt, vec![extra]);
    let bits = |p: &FeatureNetworkParams| p.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&params));

    let bytes = std::fs::read(&path).unwrap();
    let truncated = dir.path().join("short.nkf");
    std::fs::write(&truncated, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(FeatureNetworkParams::load(&truncated), Err(NkfError::Truncated(_))));

    let mut wrong = bytes.clone();
    wrong[..4].copy_from_slice(b"NKF0");
    let bad = dir.path().join("bad.nkf");
    std::fs::write(&bad, wrong).unwrap();
    let err = FeatureNetworkParams::load(&bad).unwrap_err();
    assert!(matches!(err, NkfError::BadMagic { expected, actual } if &expected == b"NKF1" && &actual == b"NKF0"));
    assert!(err.to_string().contains("NKF1"));
}

#[test]
fn training_lookup_matches_inference_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cloud = random_cloud(&mut rng, 40, 0.45);
    let config = small_config(8);
    let params = dense_random_params(config, 14);
    let full = FeatureFunction::build(&cloud, &params).unwrap();
    let queries: Vec<Vec3> = (0..30)
        .map(|_| Vec3::new(rng.gen_range(-0.55..0.55), rng.gen_range(-0.55..0.55), rng.gen_range(-0.55..0.55)))
        .collect();
    let mut tape = Tape::new();
    let vars = params.attach(&mut tape, true);
    let assignment = CellAssignment::new(cloud.points(), cloud.normals(), 8, true).unwrap();
    let rows = vars.encode(&mut tape, &assignment).unwrap();
    let trunk = vars.trunk(&mut tape, GridInput::Sparse { rows, cells: assignment.occupied_cells() }).unwrap();
    let feats = vars.features_at(&mut tape, trunk, &queries).unwrap();
    for (q, row) in queries.iter().zip(tape.value(feats).data().chunks(3)) {
        for (a, b) in full.feature(q).iter().zip(row) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

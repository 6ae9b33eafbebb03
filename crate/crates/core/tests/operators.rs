use misr_core::operators::{gaussian_profile, profile_sigma};
use misr_core::*;

fn random_volume(dims: Dims, seed: u64) -> Volume {
    sample_standard_normal(&mut SeededRng::new(seed), dims).unwrap()
}

/// Builds the operator matrix entry by entry from the physical description:
/// a unit-sum Gaussian with FWHM k, truncated at ceil(3 sigma), sampled every
/// k voxels from offset k / 2, with mirror boundaries.
fn dense_matrix(axis: Axis, k: usize, dims: Dims) -> (Vec<Vec<f64>>, Dims) {
    let a = axis.index();
    let n = dims[a];
    let sigma = k as f64 / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt());
    let r = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    let kernel: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let mirror = |mut p: i64| -> usize {
        let n = n as i64;
        if n == 1 {
            return 0;
        }
        loop {
            if p < 0 {
                p = -p;
            } else if p >= n {
                p = 2 * (n - 1) - p;
            } else {
                return p as usize;
            }
        }
    };
    let mut lr = dims;
    lr[a] = n / k;
    let cols = dims[0] * dims[1] * dims[2];
    let rows = lr[0] * lr[1] * lr[2];
    let mut m = vec![vec![0.0; cols]; rows];
    for kk in 0..lr[2] {
        for jj in 0..lr[1] {
            for ii in 0..lr[0] {
                let row = ii + lr[0] * (jj + lr[1] * kk);
                let mut hr = [ii, jj, kk];
                let centre = (hr[a] * k + k / 2) as i64;
                for (t, w) in kernel.iter().enumerate() {
                    hr[a] = mirror(centre + t as i64 - r);
                    let col = hr[0] + dims[0] * (hr[1] + dims[1] * hr[2]);
                    m[row][col] += w;
                }
            }
        }
    }
    (m, lr)
}

fn matvec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn matvec_t(m: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m[0].len()];
    for (row, yi) in m.iter().zip(y) {
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * yi;
        }
    }
    out
}

#[test]
fn adjoint_identity_over_grid() {
    for dims in [[16, 16, 16], [24, 16, 20]] {
        for axis in Axis::ALL {
            for k in [2, 4, 8, 16] {
                let op = SliceProfileOperator::new(axis, k, dims).unwrap();
                let x = random_volume(dims, 1 + k as u64);
                let y = random_volume(op.lr_dims(), 100 + k as u64);
                let lhs = dot(&op.apply_forward(&x).unwrap(), &y).unwrap();
                let rhs = dot(&x, &op.apply_adjoint(&y).unwrap()).unwrap();
                let bound = 1e-10 * x.norm() * y.norm();
                assert!((lhs - rhs).abs() <= bound, "{axis:?} k={k} {dims:?}: {lhs} vs {rhs}");
            }
        }
    }
}

#[test]
fn matches_dense_matrix() {
    for dims in [[16, 6, 5], [5, 16, 6], [6, 5, 16], [13, 11, 9]] {
        for axis in Axis::ALL {
            for k in [2, 3, 4, 8] {
                if dims[axis.index()] / k == 0 {
                    continue;
                }
                let op = SliceProfileOperator::new(axis, k, dims).unwrap();
                let (m, lr) = dense_matrix(axis, k, dims);
                assert_eq!(op.lr_dims(), lr);
                let x = random_volume(dims, 7);
                let y = random_volume(lr, 8);
                let fwd = op.apply_forward(&x).unwrap();
                let adj = op.apply_adjoint(&y).unwrap();
                for (a, b) in fwd.data().iter().zip(matvec(&m, x.data())) {
                    assert!((a - b).abs() <= 1e-12, "forward {axis:?} k={k} {dims:?}");
                }
                for (a, b) in adj.data().iter().zip(matvec_t(&m, y.data())) {
                    assert!((a - b).abs() <= 1e-12, "adjoint {axis:?} k={k} {dims:?}");
                }
            }
        }
    }
}

#[test]
fn kernel_matches_physical_description() {
    for k in [2, 3, 4, 8, 16] {
        let kern = gaussian_profile(k);
        let sigma = profile_sigma(k);
        // Half maximum sits at +-k/2 from the centre.
        let half = (-(k as f64 / 2.0).powi(2) / (2.0 * sigma * sigma)).exp();
        assert!((half - 0.5).abs() < 1e-12);
        assert_eq!(kern.len(), 2 * (3.0 * sigma).ceil() as usize + 1);
        assert!((kern.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }
}

#[test]
fn remainder_voxels_dropped() {
    let op = SliceProfileOperator::new(Axis::Z, 4, [8, 8, 18]).unwrap();
    assert_eq!(op.lr_dims(), [8, 8, 4]);
    let op = SliceProfileOperator::new(Axis::X, 5, [12, 3, 3]).unwrap();
    assert_eq!(op.lr_dims(), [2, 3, 3]);
}

#[test]
fn translation_covariance_in_plane() {
    // Shifting within the acquired plane commutes with the operator.
    let dims = [12, 10, 16];
    let x = random_volume(dims, 3);
    let shifted = Volume::from_fn(dims, [1.0; 3], |i, j, k| x.get((i + 1) % 12, (j + 3) % 10, k)).unwrap();
    let op = SliceProfileOperator::new(Axis::Z, 4, dims).unwrap();
    let a = op.apply_forward(&x).unwrap();
    let b = op.apply_forward(&shifted).unwrap();
    let lr = op.lr_dims();
    for k in 0..lr[2] {
        for j in 0..lr[1] {
            for i in 0..lr[0] {
                assert_eq!(b.get(i, j, k), a.get((i + 1) % 12, (j + 3) % 10, k));
            }
        }
    }
}

#[test]
fn stacked_adjoint_is_sum() {
    let dims = [12, 12, 12];
    let ops: Vec<_> = Axis::ALL.iter().map(|&a| SliceProfileOperator::new(a, 2, dims).unwrap()).collect();
    let stacked = StackedOperator::new(ops.clone()).unwrap();
    let x = random_volume(dims, 4);
    let ys = stacked.apply(&x).unwrap();
    let flat = stacked.apply_flat(&x).unwrap();
    assert_eq!(flat.len(), stacked.rows());
    let back = stacked.adjoint_flat(&flat).unwrap();
    let mut sum = Volume::zeros(dims).unwrap();
    for (op, y) in ops.iter().zip(&ys) {
        sum.add_scaled(1.0, &op.apply_adjoint(y).unwrap()).unwrap();
    }
    for (a, b) in back.data().iter().zip(sum.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    let lhs: f64 = flat.iter().map(|v| v * v).sum();
    let rhs = dot(&x, &back).unwrap();
    assert!((lhs - rhs).abs() < 1e-10 * lhs);
}

#[test]
fn spacing_tracks_acquisition() {
    let x = Volume::filled([8, 8, 8], [1.0, 1.0, 1.0], 0.5).unwrap();
    let m = simulate_measurement(&x, Axis::Y, 4, 0.0, &mut SeededRng::new(0)).unwrap();
    assert_eq!(m.y.spacing(), [1.0, 4.0, 1.0]);
    assert_eq!(m.op.apply_adjoint(&m.y).unwrap().spacing(), [1.0, 1.0, 1.0]);
}

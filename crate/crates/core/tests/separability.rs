//! The per-measurement gradient sum against the gradient through the
//! explicitly stacked residual.

use misr_core::priors::MixtureComponent;
use misr_core::samplers::{compute_weights, likelihood_gradient, WeightVector};
use misr_core::*;

/// One VJP of the stacked residual `W^{1/2} (A mu0 - y)` with row weights.
fn stacked_gradient<P: Prior>(prior: &P, x_t: &Volume, t: f64, ms: &[Measurement], w: &WeightVector) -> Volume {
    let stacked = StackedOperator::new(ms.iter().map(|m| m.op.clone()).collect()).unwrap();
    let mu0 = prior.denoise(x_t, t).unwrap();
    let pred = stacked.apply_flat(&mu0).unwrap();
    let mut y = Vec::with_capacity(pred.len());
    let mut row_w = Vec::with_capacity(pred.len());
    for (m, wi) in ms.iter().zip(w.as_slice()) {
        y.extend_from_slice(m.y.data());
        row_w.extend(std::iter::repeat_n(*wi, m.y.len()));
    }
    let wr: Vec<f64> = pred.iter().zip(&y).zip(&row_w).map(|((p, yi), wi)| 2.0 * wi * (p - yi)).collect();
    let cot = stacked.adjoint_flat(&wr).unwrap();
    prior.vjp(x_t, t, &cot).unwrap()
}

fn rel_err(a: &Volume, b: &Volume) -> f64 {
    a.sub(b).unwrap().norm() / b.norm().max(1e-300)
}

fn instance(seed: u64, dims: Dims, n: usize, k: usize) -> (Vec<Measurement>, Volume) {
    let mut rng = SeededRng::new(seed);
    let truth = sample_standard_normal(&mut rng, dims).unwrap().scaled(0.3);
    let ms = Axis::ALL[..n].iter().map(|&a| simulate_measurement(&truth, a, k, 0.1, &mut rng).unwrap()).collect();
    let x_t = sample_standard_normal(&mut rng, dims).unwrap();
    (ms, x_t)
}

#[test]
fn gaussian_twelve_cubed_two_views() {
    let dims = [12, 12, 12];
    let (ms, x_t) = instance(1, dims, 2, 2);
    let mean = sample_standard_normal(&mut SeededRng::new(9), dims).unwrap().scaled(0.2);
    let prior = GaussianPrior::isotropic(mean, 0.3).unwrap();
    let w = compute_weights(&ms, 0.01).unwrap();
    for t in [0.1, 0.5, 0.9] {
        let a = likelihood_gradient(&prior, &x_t, t, &ms, &w).unwrap();
        let b = stacked_gradient(&prior, &x_t, t, &ms, &w);
        assert!(rel_err(&a, &b) <= 1e-12, "t={t}: {}", rel_err(&a, &b));
    }
}

#[test]
fn mixture_random_instances() {
    let mut count = 0;
    for seed in 0..12u64 {
        let mut rng = SeededRng::new(1000 + seed);
        let n_side = rng.int_inclusive(6, 10);
        let dims = [n_side, rng.int_inclusive(6, 10), rng.int_inclusive(6, 10)];
        let k = [2, 4][rng.int_inclusive(0, 1)];
        let n = rng.int_inclusive(2, 3);
        let comps = (0..3)
            .map(|_| MixtureComponent {
                weight: rng.uniform(0.5, 1.5),
                mean: sample_standard_normal(&mut rng, dims).unwrap().scaled(0.1),
                tau2: rng.uniform(0.5, 1.0),
            })
            .collect();
        let prior = MixturePrior::new(comps).unwrap();
        let (ms, x_t) = instance(seed, dims, n, k);
        let w = compute_weights(&ms, 0.01).unwrap();
        let t = rng.uniform(0.2, 0.9);
        let a = likelihood_gradient(&prior, &x_t, t, &ms, &w).unwrap();
        let b = stacked_gradient(&prior, &x_t, t, &ms, &w);
        assert!(rel_err(&a, &b) <= 1e-12, "seed {seed}: {}", rel_err(&a, &b));
        count += 1;
    }
    assert_eq!(count, 12);
}

#[test]
fn zero_residual_gives_zero_gradient() {
    let dims = [8, 8, 8];
    let mean = sample_standard_normal(&mut SeededRng::new(2), dims).unwrap();
    let prior = GaussianPrior::isotropic(mean, 0.5).unwrap();
    let x_t = sample_standard_normal(&mut SeededRng::new(3), dims).unwrap();
    let t = 0.4;
    let mu0 = prior.denoise(&x_t, t).unwrap();
    let ms: Vec<Measurement> = [Axis::X, Axis::Z]
        .iter()
        .map(|&a| {
            let op = SliceProfileOperator::new(a, 2, dims).unwrap();
            Measurement::new(op.apply_forward(&mu0).unwrap(), op, 0.05).unwrap()
        })
        .collect();
    let w = compute_weights(&ms, 0.01).unwrap();
    let g = likelihood_gradient(&prior, &x_t, t, &ms, &w).unwrap();
    assert!(g.norm() < 1e-12);
}

#[test]
fn single_measurement_is_sisr_gradient() {
    let dims = [8, 8, 8];
    let (ms, x_t) = instance(5, dims, 1, 4);
    let mean = Volume::zeros(dims).unwrap();
    let prior = GaussianPrior::isotropic(mean, 0.5).unwrap();
    let w = compute_weights(&ms, 0.01).unwrap();
    assert_eq!(w.as_slice(), &[1.0]);
    let t = 0.3;
    let g = likelihood_gradient(&prior, &x_t, t, &ms, &w).unwrap();
    // Direct chain rule: c * A^T 2 (A mu0 - y).
    let c = prior.gain(t).unwrap();
    let r = ms[0].residual(&prior.denoise(&x_t, t).unwrap()).unwrap();
    let direct = ms[0].op.apply_adjoint(&r).unwrap().scaled(2.0 * c);
    assert!(rel_err(&g, &direct) < 1e-13);
}

#[test]
fn mismatched_grids_rejected() {
    let a = Volume::zeros([8, 8, 8]).unwrap();
    let b = Volume::zeros([8, 8, 6]).unwrap();
    let mut rng = SeededRng::new(0);
    let ms = vec![
        simulate_measurement(&a, Axis::X, 2, 0.0, &mut rng).unwrap(),
        simulate_measurement(&b, Axis::Y, 2, 0.0, &mut rng).unwrap(),
    ];
    let prior = GaussianPrior::isotropic(a.clone(), 1.0).unwrap();
    let w = WeightVector::uniform(2);
    assert!(matches!(likelihood_gradient(&prior, &a, 0.5, &ms, &w), Err(Error::Shape { .. })));
}

//! Nyström error bounds and spectral tails against dense eigendecompositions.

use std::sync::Arc;

use co2_core::data::PointCloud;
use co2_core::kernels::{gram, GaussianKernel};
use co2_core::lowrank::{nystrom, spectrum, tail_sum, trace_norm};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `Q diag(σ) Qᵀ` with a random orthogonal `Q`.
fn with_spectrum(sigma: &[f64], seed: u64) -> DMatrix<f64> {
    let n = sigma.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
    let q = g.qr().q();
    &q * DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(sigma)) * q.transpose()
}

fn mean_error(a: &DMatrix<f64>, r: usize, width: usize, seeds: u64) -> f64 {
    (0..seeds)
        .map(|s| trace_norm(&(a - nystrom(a, r, width, s).unwrap().reconstruct())))
        .sum::<f64>()
        / seeds as f64
}

#[test]
fn geometric_spectrum_error_bound() {
    let sigma: Vec<f64> = (0..20).map(|j| 0.6f64.powi(j)).collect();
    let a = with_spectrum(&sigma, 4);
    let tail: f64 = sigma[5..].iter().sum();
    let err = mean_error(&a, 5, 15, 50);
    assert!(err <= 1.5 * (4.0 / 3.0) * tail, "{err} vs tail {tail}");
}

#[test]
fn wider_sketches_do_not_hurt() {
    let sigma: Vec<f64> = (0..30).map(|j| 0.75f64.powi(j)).collect();
    let a = with_spectrum(&sigma, 8);
    let errs: Vec<f64> = [6, 10, 15, 25]
        .iter()
        .map(|&w| mean_error(&a, 5, w, 30))
        .collect();
    for pair in errs.windows(2) {
        assert!(pair[1] <= 1.05 * pair[0], "{errs:?}");
    }
}

#[test]
fn gaussian_tail_decays() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 200;
    let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0).collect();
    let c = Arc::new(PointCloud::new(xs, n, 1).unwrap());
    let k = gram(&GaussianKernel::new(1.0).unwrap(), &c);
    let t = tail_sum(&(k.entries() / n as f64));
    assert!((t.values[0] - 1.0).abs() <= 1e-10);
    assert_eq!(t.values[n], 0.0);
    assert!(t.values.windows(2).all(|w| w[1] <= w[0]));
    let pts: Vec<(f64, f64)> = (5..=30).map(|i| (i as f64, t.values[i].ln())).collect();
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let slope = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / pts.iter().map(|(x, _)| (x - mx).powi(2)).sum::<f64>();
    assert!(slope < -0.1, "slope {slope}");
    assert!(pts.windows(2).all(|w| w[1].1 < w[0].1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn factor_shape_and_interlacing(
        sigma in prop::collection::vec(0.0f64..2.0, 6..16),
        r in 1usize..5,
        extra in 0usize..6,
        seed in 0u64..1000,
    ) {
        let a = with_spectrum(&sigma, seed);
        let width = (r + extra).min(sigma.len());
        let f = nystrom(&a, r, width, seed).unwrap();
        prop_assert!((f.u.transpose() * &f.u - DMatrix::identity(r, r)).amax() <= 1e-8);
        prop_assert!(f.lambda.windows(2).all(|w| w[1] <= w[0]));
        let exact = spectrum(&a);
        for (l, s) in f.lambda.iter().zip(&exact) {
            prop_assert!(*l >= 0.0);
            prop_assert!(*l <= s + f.nu_shift + 1e-8);
        }
        let again = nystrom(&a, r, width, seed).unwrap();
        prop_assert_eq!(f.lambda, again.lambda);
    }

    #[test]
    fn tail_sum_starts_at_trace(sigma in prop::collection::vec(0.0f64..1.0, 1..12), seed in 0u64..100) {
        let a = with_spectrum(&sigma, seed);
        let t = tail_sum(&a);
        prop_assert!((t.values[0] - a.trace()).abs() <= 1e-10);
        prop_assert!(t.values.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }
}

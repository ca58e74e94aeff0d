use std::sync::Arc;

use co2_core::co2::{
    compress_with, kernel_selection, kkt_residual, refine_weights, select_tau, Co2Config,
};
use co2_core::data::{DiscreteDistribution, PointCloud};
use co2_core::recombination::Coreset;
use nalgebra::DMatrix;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn tau_monotone_in_beta_and_inverse_in_n(
        eig in prop::collection::vec(0.0f64..1.0, 1..8),
        b1 in 0.01f64..0.99,
        b2 in 0.01f64..0.99,
        n in 1usize..500,
        seed in 0u64..100,
    ) {
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        let t_lo = select_tau(&eig, lo, n, 2000, seed).unwrap();
        let t_hi = select_tau(&eig, hi, n, 2000, seed).unwrap();
        prop_assert!(t_lo <= t_hi);
        let unit = select_tau(&eig, lo, 1, 2000, seed).unwrap();
        prop_assert_eq!(t_lo, unit / n as f64);
    }

    #[test]
    fn refinement_descends(
        entries in prop::collection::vec(-1.0f64..1.0, 64),
        mask in prop::collection::vec(any::<bool>(), 8),
    ) {
        prop_assume!(mask.iter().any(|&b| b));
        let b = DMatrix::from_column_slice(8, 8, &entries);
        let q = &b * b.transpose();
        let n = 8;
        let parent = Arc::new(PointCloud::new((0..n).map(|i| i as f64).collect(), n, 1).unwrap());
        let s = mask.iter().filter(|&&b| b).count() as f64;
        let dense: Vec<f64> = mask.iter().map(|&b| if b { 1.0 / s } else { 0.0 }).collect();
        let cs = Coreset::from_dense(parent, &dense, "test", s as usize).unwrap();
        let reference = vec![1.0 / n as f64; n];
        let r = refine_weights(&cs, &q, &reference).unwrap();
        prop_assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(*r.history.last().unwrap() <= r.history[0]);
        prop_assert!(kkt_residual(&q, &r.coreset, &reference) <= 1e-5);
    }

    #[test]
    fn compress_is_deterministic_and_convex(seed in 0u64..50, m in 2usize..8) {
        let n = 60;
        let xs: Vec<f64> = (0..2 * n).map(|i| (((i as u64 + 1) * 2_654_435_761 + seed) % 1009) as f64 / 250.0).collect();
        let data = DiscreteDistribution::uniform(Arc::new(PointCloud::new(xs, n, 2).unwrap()));
        let config = Co2Config::fixed(1.0, m).with_seed(seed);
        let form = kernel_selection(&data, &config).unwrap();
        let a = compress_with(&data, &config, &form).unwrap().coreset;
        let b = compress_with(&data, &config, &form).unwrap().coreset;
        prop_assert!(a.len() <= m);
        prop_assert!((a.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        prop_assert_eq!(&a.indices, &b.indices);
        prop_assert_eq!(a.quad_error, b.quad_error);
        prop_assert!(a.quad_error.unwrap() >= -1e-10);
    }
}

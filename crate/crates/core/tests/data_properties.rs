use std::sync::Arc;

use co2_core::data::{standardize, DiscreteDistribution, PointCloud};
use proptest::prelude::*;

proptest! {
    #[test]
    fn standardize_is_idempotent(coords in prop::collection::vec(-100.0f64..100.0, 6..60), d in 1usize..4) {
        let n = coords.len() / d;
        prop_assume!(n >= 2);
        let cloud = PointCloud::new(coords[..n * d].to_vec(), n, d).unwrap();
        let (once, _) = standardize(&cloud).unwrap();
        let (twice, _) = standardize(&once).unwrap();
        for (a, b) in once.coords().iter().zip(twice.coords()) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn normalized_weights_are_a_distribution(raw in prop::collection::vec(0.0f64..5.0, 1..40)) {
        prop_assume!(raw.iter().any(|&w| w > 0.0));
        let n = raw.len();
        let cloud = Arc::new(PointCloud::new((0..n).map(|i| i as f64).collect(), n, 1).unwrap());
        let mu = DiscreteDistribution::normalized(cloud, raw).unwrap();
        prop_assert!((mu.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(mu.weights().iter().all(|&w| w >= 0.0));
    }
}

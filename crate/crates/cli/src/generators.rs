//! Synthetic datasets used by the benchmarks.

use std::sync::Arc;

use co2_core::data::PointCloud;
use co2_core::rng::rng_from_seed;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Component means of the planar eight-Gaussian mixture.
pub const MIXTURE_MEANS: [[f64; 2]; 8] = [
    [3.0, 3.0],
    [3.0, -3.0],
    [-3.0, 3.0],
    [-3.0, -3.0],
    [0.0, 6.0],
    [0.0, -6.0],
    [6.0, 0.0],
    [-6.0, 0.0],
];

/// Equal-weight mixture of unit-covariance Gaussians at [`MIXTURE_MEANS`].
pub fn gaussian_mixture(n: usize, seed: u64) -> Arc<PointCloud> {
    let mut rng = rng_from_seed(seed);
    let mut coords = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let mean = MIXTURE_MEANS[rng.random_range(0..MIXTURE_MEANS.len())];
        for m in mean {
            let z: f64 = StandardNormal.sample(&mut rng);
            coords.push(m + z);
        }
    }
    Arc::new(PointCloud::new(coords, n, 2).expect("finite samples"))
}

/// `n` draws from `N(0, I_d)`.
pub fn standard_normal(n: usize, d: usize, seed: u64) -> Arc<PointCloud> {
    let mut rng = rng_from_seed(seed);
    let coords = (0..n * d)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Arc::new(PointCloud::new(coords, n, d).expect("finite samples"))
}

/// `n` draws from the unit cube `[0, 1]^d`.
pub fn unit_cube(n: usize, d: usize, seed: u64) -> Arc<PointCloud> {
    let mut rng = rng_from_seed(seed);
    let coords = (0..n * d).map(|_| rng.random::<f64>()).collect();
    Arc::new(PointCloud::new(coords, n, d).expect("finite samples"))
}

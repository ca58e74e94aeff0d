//! Threshold selection from the limiting law of `n·q(ℙₙ - ℙ)`.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

pub const DEFAULT_DRAWS: usize = 100_000;
pub const MIN_DRAWS: usize = 1000;

/// Default quantile level `1/ln n`, capped below one for tiny samples.
pub fn default_beta(n: usize) -> f64 {
    (1.0 / (n.max(3) as f64).ln()).min(0.5)
}

/// Empirical β-quantile of `Σ σᵢ χ²ᵢ(1)` over `draws` simulations, divided
/// by `n`.
pub fn select_tau(
    eigenvalues: &[f64],
    beta: f64,
    n: usize,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "beta must lie in (0, 1), got {beta}"
        )));
    }
    if draws < MIN_DRAWS {
        return Err(Error::InvalidArgument(format!(
            "at least {MIN_DRAWS} draws are required, got {draws}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "sample size must be positive".into(),
        ));
    }
    let sigma: Vec<f64> = eigenvalues.iter().copied().filter(|&s| s > 0.0).collect();
    if sigma.is_empty() {
        return Ok(0.0);
    }
    let mut rng = rng_from_seed(seed);
    let mut samples: Vec<f64> = (0..draws)
        .map(|_| {
            sigma
                .iter()
                .map(|s| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    s * z * z
                })
                .sum()
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    let k = ((beta * draws as f64).ceil() as usize).clamp(1, draws) - 1;
    Ok(samples[k] / n as f64)
}

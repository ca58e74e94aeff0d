//! Reference coreset constructions: uniform random subsets and greedy
//! kernel herding.

use std::sync::Arc;

use nalgebra::DVector;
use rand::seq::index;

use super::form::WeightObjective;
use crate::data::PointCloud;
use crate::error::{Error, Result};
use crate::recombination::Coreset;
use crate::rng::rng_from_seed;

/// `m` distinct points drawn uniformly, equally weighted.
pub fn random_subset(parent: Arc<PointCloud>, m: usize, seed: u64) -> Result<Coreset> {
    let n = parent.len();
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!(
            "subset size must be in 1..={n}, got {m}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut dense = vec![0.0; n];
    for i in index::sample(&mut rng, n, m) {
        dense[i] = 1.0 / m as f64;
    }
    Ok(Coreset::from_dense(parent, &dense, "random", m)?.with_seed(seed))
}

/// Greedy herding without replacement: each step adds the point that
/// minimizes `q(uniform(S) - reference)` for the enlarged set `S`.
pub fn herding<Q: WeightObjective + ?Sized>(
    parent: Arc<PointCloud>,
    q: &Q,
    reference: &[f64],
    m: usize,
) -> Result<Coreset> {
    let n = q.size();
    if parent.len() != n || reference.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: reference.len(),
        });
    }
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!(
            "herding size must be in 1..={n}, got {m}"
        )));
    }
    let all: Vec<usize> = (0..n).collect();
    let target = q.cross_terms(reference, &all);
    let diag = q.diagonal_entries();
    // running Σ_{i∈S} Q[:, i] and Σ_{i,l∈S} Q_il
    let mut column_sum = DVector::zeros(n);
    let mut block_sum = 0.0;
    let mut target_sum = 0.0;
    let mut chosen = vec![false; n];
    for k in 1..=m {
        let kf = k as f64;
        let best = (0..n)
            .filter(|&j| !chosen[j])
            .map(|j| {
                let quad = (block_sum + 2.0 * column_sum[j] + diag[j]) / (kf * kf);
                let lin = 2.0 * (target_sum + target[j]) / kf;
                (quad - lin, j)
            })
            .min_by(|a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, j)| j)
            .expect("fewer than n points chosen");
        block_sum += 2.0 * column_sum[best] + diag[best];
        target_sum += target[best];
        column_sum += q.column(best);
        chosen[best] = true;
    }
    let dense: Vec<f64> = chosen
        .iter()
        .map(|&c| if c { 1.0 / m as f64 } else { 0.0 })
        .collect();
    Coreset::from_dense(parent, &dense, "herding", m)
}

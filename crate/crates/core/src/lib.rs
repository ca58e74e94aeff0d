//! Coresets for the Sinkhorn divergence.
//!
//! An n-point empirical distribution is compressed to a convexly weighted
//! m-point coreset by matching the leading eigen-moments of the entropic
//! self-transport plan with Carathéodory recombination. The pieces:
//!
//! - [`data`]: point clouds, CSV ingestion, standardization, weighted distributions.
//! - [`kernels`]: Gaussian kernel, Gram matrices, MMD quadratic forms.
//! - [`sinkhorn`]: log-domain entropic OT, the debiased divergence, self-plans.
//! - [`lowrank`]: randomized fixed-rank Nyström factorization and spectral tails.
//! - [`recombination`]: moment-preserving support reduction and the tolerance sweep.
//! - [`co2`]: the compression pipeline, τ selection, weight refinement, baselines.

pub mod co2;
pub mod data;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod lowrank;
pub mod recombination;
pub mod rng;
pub mod sinkhorn;

pub use error::{Error, Result};

//! Gaussian kernel, Gram matrices and MMD quadratic forms.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::{sq_dist, DiscreteDistribution, PointCloud};
use crate::error::{Error, Result};
use crate::linalg::{self, SymmetricOperator};

/// Quadratic-form values in `[-ROUNDOFF_TOL, 0)` are treated as zero.
pub const ROUNDOFF_TOL: f64 = 1e-10;

/// `k(x, y) = exp(-‖x - y‖² / ε)`. The bandwidth is the same ε that
/// regularizes the Sinkhorn problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianKernel {
    epsilon: f64,
}

impl GaussianKernel {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kernel bandwidth must be positive, got {epsilon}"
            )));
        }
        Ok(Self { epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                found: y.len(),
            });
        }
        Ok(self.eval_unchecked(x, y))
    }

    #[inline]
    fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        (-sq_dist(x, y) / self.epsilon).exp()
    }
}

pub fn kernel_eval(k: &GaussianKernel, x: &[f64], y: &[f64]) -> Result<f64> {
    k.eval(x, y)
}

/// Dense kernel matrix over one point cloud.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    entries: DMatrix<f64>,
    kernel: GaussianKernel,
    cloud: Arc<PointCloud>,
}

impl GramMatrix {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn kernel(&self) -> GaussianKernel {
        self.kernel
    }

    pub fn cloud(&self) -> &Arc<PointCloud> {
        &self.cloud
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn matches(&self, d: &DiscreteDistribution) -> bool {
        Arc::ptr_eq(&self.cloud, d.shared_cloud()) || *self.cloud == *d.cloud()
    }
}

impl SymmetricOperator for GramMatrix {
    fn dim(&self) -> usize {
        self.entries.nrows()
    }

    fn apply_block(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.entries.apply_block(x)
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.entries.apply(v)
    }

    fn diagonal(&self) -> Option<DVector<f64>> {
        Some(self.entries.diagonal())
    }
}

/// Builds `[k(xᵢ, xⱼ)]`, one column per task.
pub fn gram(k: &GaussianKernel, cloud: &Arc<PointCloud>) -> GramMatrix {
    let n = cloud.len();
    let mut data = vec![0.0; n * n];
    data.par_chunks_mut(n).enumerate().for_each(|(j, col)| {
        let xj = cloud.point(j);
        for (i, c) in col.iter_mut().enumerate() {
            *c = if i == j {
                1.0
            } else {
                k.eval_unchecked(cloud.point(i), xj)
            };
        }
    });
    GramMatrix {
        entries: DMatrix::from_vec(n, n, data),
        kernel: *k,
        cloud: cloud.clone(),
    }
}

/// Maps roundoff-level negatives to zero and rejects genuinely negative values.
pub fn clamp_roundoff(q: f64) -> Result<f64> {
    if q >= 0.0 {
        Ok(q)
    } else if q >= -ROUNDOFF_TOL {
        Ok(0.0)
    } else {
        Err(Error::NegativeQuadraticForm(q))
    }
}

/// `wᵀ A w` for any symmetric matrix view.
pub fn quad_form<A: SymmetricOperator + ?Sized>(a: &A, w: &[f64]) -> Result<f64> {
    if w.len() != a.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: w.len(),
        });
    }
    Ok(linalg::quadratic(a, w))
}

/// Squared MMD between two distributions on the Gram matrix's cloud.
pub fn mmd_sq(k: &GramMatrix, a: &DiscreteDistribution, b: &DiscreteDistribution) -> Result<f64> {
    if !(k.matches(a) && k.matches(b)) {
        return Err(Error::CloudMismatch);
    }
    let w: Vec<f64> = a
        .weights()
        .iter()
        .zip(b.weights())
        .map(|(x, y)| x - y)
        .collect();
    clamp_roundoff(quad_form(k, &w)?)
}

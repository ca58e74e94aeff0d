//! Randomized fixed-rank Nyström approximation of PSD operators and
//! spectral tail diagnostics.

use nalgebra::{DMatrix, SymmetricEigen, SVD};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
pub use crate::linalg::SymmetricOperator;
use crate::rng::rng_from_seed;

/// Rank-r factorization `A ≈ U diag(λ) Uᵀ`.
#[derive(Debug, Clone)]
pub struct PsdFactor {
    /// n×r, orthonormal columns.
    pub u: DMatrix<f64>,
    /// Nonincreasing, nonnegative.
    pub lambda: Vec<f64>,
    /// Number of sketch columns actually used.
    pub sketch_width: usize,
    /// Stabilizing shift added before the Cholesky step.
    pub nu_shift: f64,
}

impl PsdFactor {
    pub fn rank(&self) -> usize {
        self.lambda.len()
    }

    pub fn dim(&self) -> usize {
        self.u.nrows()
    }

    /// `U diag(λ) Uᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut scaled = self.u.clone();
        for (j, l) in self.lambda.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*l);
        }
        scaled * self.u.transpose()
    }

    /// Keeps the leading `r` eigenpairs.
    pub fn truncate(&self, r: usize) -> PsdFactor {
        let r = r.min(self.rank());
        PsdFactor {
            u: self.u.columns(0, r).clone_owned(),
            lambda: self.lambda[..r].to_vec(),
            sketch_width: self.sketch_width,
            nu_shift: self.nu_shift,
        }
    }
}

/// Standard-normal n×k matrix drawn column by column.
fn gaussian_sketch(n: usize, k: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    let data: Vec<f64> = (0..n * k)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    DMatrix::from_vec(n, k, data)
}

fn spectral_norm(y: &DMatrix<f64>) -> f64 {
    let gram = y.transpose() * y;
    let top = SymmetricEigen::new(gram).eigenvalues.max();
    top.max(0.0).sqrt()
}

/// Fixed-rank PSD approximation from a Gaussian sketch of width
/// `sketch_width`, truncated to rank `r`.
///
/// The sketch is orthonormalized, `Y = AΩ` is shifted by `ν = u·‖Y‖₂`
/// (`u` the unit roundoff) so that `ΩᵀY` is safely positive definite, and
/// the factor is read off the thin SVD of `Y C⁻¹` where `CᵀC = ΩᵀY`. The
/// shift is removed from the squared singular values at the end.
pub fn nystrom<A: SymmetricOperator + ?Sized>(
    a: &A,
    r: usize,
    sketch_width: usize,
    seed: u64,
) -> Result<PsdFactor> {
    let n = a.dim();
    if r == 0 || sketch_width < r {
        return Err(Error::InvalidArgument(format!(
            "Nyström needs 1 <= rank <= sketch width, got rank {r} and width {sketch_width}"
        )));
    }
    let mut width = sketch_width;
    if width > n {
        log::warn!("sketch width {width} exceeds dimension {n}; clamping");
        width = n;
    }
    let r = r.min(width);

    let omega = gaussian_sketch(n, width, seed).qr().q();
    let y0 = a.apply_block(&omega);
    let mut nu = f64::EPSILON * spectral_norm(&y0).max(f64::MIN_POSITIVE);
    // roundoff can leave ΩᵀAΩ indefinite; grow the shift until it factors
    let (y, chol) = loop {
        let y = &y0 + &omega * nu;
        let b = omega.transpose() * &y;
        if let Some(chol) = ((&b + b.transpose()) * 0.5).cholesky() {
            break (y, chol);
        }
        if nu > 1e-6 * spectral_norm(&y0).max(1.0) {
            return Err(Error::CholeskyFailed);
        }
        nu *= 100.0;
    };
    // Z = Y C⁻¹ with C = Lᵀ, i.e. L Zᵀ = Yᵀ
    let zt = chol
        .l()
        .solve_lower_triangular(&y.transpose())
        .ok_or(Error::CholeskyFailed)?;
    let z = zt.transpose();

    let svd = SVD::new(z, true, false);
    let uz = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    order.truncate(r);

    let mut u = DMatrix::zeros(n, r);
    let mut lambda = Vec::with_capacity(r);
    for (k, &idx) in order.iter().enumerate() {
        u.set_column(k, &uz.column(idx));
        let s = svd.singular_values[idx];
        lambda.push((s * s - nu).max(0.0));
    }
    Ok(PsdFactor {
        u,
        lambda,
        sketch_width: width,
        nu_shift: nu,
    })
}

/// Eigenvalues of a symmetric matrix in nonincreasing order.
pub fn spectrum(a: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(a.clone())
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// `values[i] = Σ_{j > i} σⱼ` for `i = 0..=n` over the nonincreasing
/// spectrum `σ` of a normalized Gram or plan matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TailSum {
    pub eigenvalues: Vec<f64>,
    pub values: Vec<f64>,
}

impl TailSum {
    pub fn from_spectrum(mut eigenvalues: Vec<f64>) -> Self {
        eigenvalues.sort_by(|x, y| y.total_cmp(x));
        let clipped: Vec<f64> = eigenvalues.iter().map(|&l| l.max(0.0)).collect();
        let mut values = vec![0.0; clipped.len() + 1];
        for i in (0..clipped.len()).rev() {
            values[i] = values[i + 1] + clipped[i];
        }
        Self {
            eigenvalues,
            values,
        }
    }

    pub fn at(&self, i: usize) -> f64 {
        self.values[i.min(self.values.len() - 1)]
    }

    /// Smallest `i` with `T̂(i) <= threshold`.
    pub fn first_below(&self, threshold: f64) -> usize {
        self.values
            .iter()
            .position(|&t| t <= threshold)
            .unwrap_or(self.values.len() - 1)
    }
}

pub fn tail_sum(k_over_n: &DMatrix<f64>) -> TailSum {
    TailSum::from_spectrum(spectrum(k_over_n))
}

/// Trace norm of a symmetric matrix.
pub fn trace_norm(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(a.clone())
        .eigenvalues
        .iter()
        .map(|l| l.abs())
        .sum()
}

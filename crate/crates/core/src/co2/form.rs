//! Quadratic forms approximating the Sinkhorn divergence around ℙₙ.
//!
//! For a signed measure `w` supported on the data, with `a` the data weights,
//! `z = D^{-1/2} w` and `M = D^{-1/2} π D^{-1/2}` the normalized self-plan:
//!
//! ```text
//! fast:  q(w) = (ε/2) zᵀ M z
//! exact: q(w) = (ε/2) zᵀ (I - M²)⁺ M z
//! ```
//!
//! The exact form is the second-order term of `S(ℙₙ, ℙₙ + w)`. It is
//! evaluated as the fast form plus the spectral correction
//! `Σ (λᵢ/(1 - λᵢ²) - λᵢ) ⟨z, uᵢ⟩²` over the factored eigenpairs with
//! `λᵢ < 1`; the correction left out on the unfactored remainder is of relative
//! size `λ²/(1 - λ²)` for its largest eigenvalue.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, SymmetricOperator};
use crate::lowrank::PsdFactor;
use crate::rng::rng_from_seed;
use crate::sinkhorn::SelfPlan;

/// Eigenvalues at or above this are treated as the unit (mass) eigenvalue.
pub const UNIT_EIGENVALUE: f64 = 1.0 - 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QuadMode {
    /// `(ε/2)·zᵀMz` straight from the plan.
    #[default]
    XiFast,
    /// `(I - M²)⁺ M`, corrected on the Nyström factor.
    GExact,
}

/// A quadratic objective over weight vectors, as needed by weight
/// refinement and herding.
pub trait WeightObjective: Sync {
    fn size(&self) -> usize;

    /// Symmetric matrix of the form, restricted to `idx × idx`.
    fn restricted(&self, idx: &[usize]) -> DMatrix<f64>;

    /// `(Q w)[idx]`.
    fn cross_terms(&self, w: &[f64], idx: &[usize]) -> DVector<f64>;

    /// `wᵀ Q w`.
    fn value(&self, w: &[f64]) -> f64;

    /// Column `j` of the matrix.
    fn column(&self, j: usize) -> DVector<f64> {
        let n = self.size();
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let all: Vec<usize> = (0..n).collect();
        self.cross_terms(&e, &all)
    }

    fn diagonal_entries(&self) -> Vec<f64> {
        (0..self.size())
            .map(|j| self.restricted(&[j])[(0, 0)])
            .collect()
    }
}

impl WeightObjective for DMatrix<f64> {
    fn size(&self) -> usize {
        self.nrows()
    }

    fn restricted(&self, idx: &[usize]) -> DMatrix<f64> {
        self.select_rows(idx).select_columns(idx)
    }

    fn cross_terms(&self, w: &[f64], idx: &[usize]) -> DVector<f64> {
        let full = linalg::par_matvec(self, w);
        DVector::from_iterator(idx.len(), idx.iter().map(|&i| full[i]))
    }

    fn value(&self, w: &[f64]) -> f64 {
        linalg::quadratic(self, w)
    }
}

impl WeightObjective for crate::kernels::GramMatrix {
    fn size(&self) -> usize {
        self.len()
    }

    fn restricted(&self, idx: &[usize]) -> DMatrix<f64> {
        WeightObjective::restricted(self.entries(), idx)
    }

    fn cross_terms(&self, w: &[f64], idx: &[usize]) -> DVector<f64> {
        WeightObjective::cross_terms(self.entries(), w, idx)
    }

    fn value(&self, w: &[f64]) -> f64 {
        WeightObjective::value(self.entries(), w)
    }
}

/// The Sinkhorn second-order form at ℙₙ in one of two evaluation modes.
#[derive(Debug, Clone)]
pub struct SinkhornQuadraticForm {
    pub mode: QuadMode,
    plan: SelfPlan,
    /// `D^{-1/2} π D^{-1/2}`.
    normalized: DMatrix<f64>,
    /// Nyström factor of `normalized`.
    pub factor: PsdFactor,
    /// `1/√aᵢ`, zero off the support.
    inv_sqrt: Vec<f64>,
}

impl SinkhornQuadraticForm {
    pub fn new(mode: QuadMode, plan: SelfPlan, factor: PsdFactor) -> Result<Self> {
        let normalized = plan.normalized();
        if factor.dim() != normalized.nrows() {
            return Err(Error::DimensionMismatch {
                expected: normalized.nrows(),
                found: factor.dim(),
            });
        }
        let inv_sqrt = plan
            .weights()
            .iter()
            .map(|&a| if a > 0.0 { 1.0 / a.sqrt() } else { 0.0 })
            .collect();
        Ok(Self {
            mode,
            plan,
            normalized,
            factor,
            inv_sqrt,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.plan.epsilon()
    }

    pub fn plan(&self) -> &SelfPlan {
        &self.plan
    }

    /// `D^{-1/2} π D^{-1/2}` (`n·π` for uniform weights).
    pub fn normalized_plan(&self) -> &DMatrix<f64> {
        &self.normalized
    }

    fn to_z(&self, w: &[f64]) -> Vec<f64> {
        w.iter().zip(&self.inv_sqrt).map(|(w, s)| w * s).collect()
    }

    /// Value of the form in the configured mode; `q(0) = 0`.
    pub fn eval(&self, w: &[f64]) -> f64 {
        match self.mode {
            QuadMode::XiFast => self.eval_fast(w),
            QuadMode::GExact => self.eval_exact(w),
        }
    }

    /// `(ε/2) zᵀ M z`.
    pub fn eval_fast(&self, w: &[f64]) -> f64 {
        let z = self.to_z(w);
        0.5 * self.epsilon() * linalg::quadratic(&self.normalized, &z)
    }

    /// `(ε/2) Σ g(λᵢ) ⟨z, uᵢ⟩²` over factor eigenpairs with `λᵢ < 1`.
    fn spectral(&self, w: &[f64], g: impl Fn(f64) -> f64) -> f64 {
        let z = DVector::from_vec(self.to_z(w));
        let coeffs = self.factor.u.transpose() * z;
        let s: f64 = self
            .factor
            .lambda
            .iter()
            .zip(coeffs.iter())
            .filter(|(&l, _)| l < UNIT_EIGENVALUE)
            .map(|(&l, c)| g(l) * c * c)
            .sum();
        0.5 * self.epsilon() * s
    }

    /// `(ε/2) zᵀ M z + (ε/2) Σ (λᵢ/(1 - λᵢ²) - λᵢ) ⟨z, uᵢ⟩²`.
    pub fn eval_exact(&self, w: &[f64]) -> f64 {
        self.eval_fast(w) + self.spectral(w, correction)
    }

    /// The fast form restricted to the factored subspace,
    /// `(ε/2) Σ λᵢ ⟨z, uᵢ⟩²`.
    pub fn eval_fast_factored(&self, w: &[f64]) -> f64 {
        self.spectral(w, |l| l)
    }

    /// Diagonal of the form's matrix in weight coordinates.
    pub fn diagonal(&self) -> Vec<f64> {
        let half_eps = 0.5 * self.epsilon();
        let n = self.normalized.nrows();
        let dense: Vec<f64> = (0..n).map(|i| self.normalized[(i, i)]).collect();
        let scale = |i: usize| half_eps * self.inv_sqrt[i] * self.inv_sqrt[i];
        match self.mode {
            QuadMode::XiFast => (0..n).map(|i| scale(i) * dense[i]).collect(),
            QuadMode::GExact => (0..n)
                .map(|i| {
                    let extra: f64 = self
                        .factor
                        .lambda
                        .iter()
                        .enumerate()
                        .filter(|(_, &l)| l < UNIT_EIGENVALUE)
                        .map(|(k, &l)| correction(l) * self.factor.u[(i, k)].powi(2))
                        .sum();
                    scale(i) * (dense[i] + extra)
                })
                .collect(),
        }
    }

    /// Leading eigenvectors of the factor excluding the unit eigenvalue,
    /// mapped to weight coordinates (`D^{-1/2} uᵢ`), at most `k` of them.
    pub fn moment_columns(&self, k: usize) -> DMatrix<f64> {
        let keep: Vec<usize> = (0..self.factor.rank())
            .filter(|&i| self.factor.lambda[i] < UNIT_EIGENVALUE)
            .take(k)
            .collect();
        let n = self.normalized.nrows();
        DMatrix::from_fn(n, keep.len(), |i, j| {
            self.factor.u[(i, keep[j])] * self.inv_sqrt[i]
        })
    }

    /// Nontrivial eigenvalues of the normalized kernel `(ε/2)·M`, which
    /// drive the limiting law of `n·q(ℙₙ - ℙ)`.
    pub fn kernel_eigenvalues(&self) -> Vec<f64> {
        let half_eps = 0.5 * self.epsilon();
        self.factor
            .lambda
            .iter()
            .filter(|&&l| l < UNIT_EIGENVALUE)
            .map(|l| half_eps * l)
            .collect()
    }
}

impl WeightObjective for SinkhornQuadraticForm {
    fn size(&self) -> usize {
        self.normalized.nrows()
    }

    fn restricted(&self, idx: &[usize]) -> DMatrix<f64> {
        let half_eps = 0.5 * self.epsilon();
        let fast = DMatrix::from_fn(idx.len(), idx.len(), |r, c| {
            let (i, j) = (idx[r], idx[c]);
            half_eps * self.normalized[(i, j)] * self.inv_sqrt[i] * self.inv_sqrt[j]
        });
        match self.mode {
            QuadMode::XiFast => fast,
            QuadMode::GExact => {
                let basis = self.correction_basis(idx);
                fast + basis.transpose() * basis
            }
        }
    }

    fn cross_terms(&self, w: &[f64], idx: &[usize]) -> DVector<f64> {
        let half_eps = 0.5 * self.epsilon();
        let z = self.to_z(w);
        let mz = linalg::par_matvec(&self.normalized, &z);
        let fast = DVector::from_iterator(
            idx.len(),
            idx.iter().map(|&i| half_eps * self.inv_sqrt[i] * mz[i]),
        );
        match self.mode {
            QuadMode::XiFast => fast,
            QuadMode::GExact => {
                let all: Vec<usize> = (0..w.len()).collect();
                let coeffs = self.correction_basis(&all) * DVector::from_column_slice(w);
                fast + self.correction_basis(idx).transpose() * coeffs
            }
        }
    }

    fn value(&self, w: &[f64]) -> f64 {
        self.eval(w)
    }
}

impl SinkhornQuadraticForm {
    /// Rows `√(ε/2 · g(λₖ)) uₖ[i]/√aᵢ` so that the exact form is `‖B w‖²`.
    /// Rows `√((ε/2)·(λ/(1 - λ²) - λ)) D^{-1/2} u` of the exact-mode correction.
    fn correction_basis(&self, idx: &[usize]) -> DMatrix<f64> {
        let half_eps = 0.5 * self.epsilon();
        let keep: Vec<(usize, f64)> = self
            .factor
            .lambda
            .iter()
            .enumerate()
            .filter(|(_, &l)| l < UNIT_EIGENVALUE)
            .map(|(k, &l)| (k, (half_eps * correction(l)).sqrt()))
            .collect();
        DMatrix::from_fn(keep.len(), idx.len(), |r, c| {
            let (k, s) = keep[r];
            s * self.factor.u[(idx[c], k)] * self.inv_sqrt[idx[c]]
        })
    }
}

/// `λ/(1 - λ²) - λ = λ³/(1 - λ²)`.
fn correction(l: f64) -> f64 {
    l * l * l / (1.0 - l * l)
}

/// Rademacher-probe estimate of `diag(A)`: the mean of `z ⊙ Az`.
pub fn hutchinson_diag<A: SymmetricOperator + ?Sized>(
    op: &A,
    probes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if probes == 0 {
        return Err(Error::InvalidArgument(
            "at least one probe is required".into(),
        ));
    }
    const BLOCK: usize = 64;
    let n = op.dim();
    let mut rng = rng_from_seed(seed);
    let mut acc = vec![0.0; n];
    let mut done = 0;
    while done < probes {
        let k = BLOCK.min(probes - done);
        let z = DMatrix::from_fn(n, k, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
        let az = op.apply_block(&z);
        for j in 0..k {
            for i in 0..n {
                acc[i] += z[(i, j)] * az[(i, j)];
            }
        }
        done += k;
    }
    Ok(acc.into_iter().map(|s| s / probes as f64).collect())
}

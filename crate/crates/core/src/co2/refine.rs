//! Post-selection weight optimization on a fixed support.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::form::WeightObjective;
use crate::error::{Error, Result};
use crate::linalg::project_simplex;
use crate::recombination::Coreset;

pub const MAX_ITER: usize = 500;
pub const REL_IMPROVEMENT: f64 = 1e-12;
const STALL_RUN: usize = 3;

/// Trace of a refinement run.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub coreset: Coreset,
    /// Objective before each iteration and after the last one.
    pub history: Vec<f64>,
}

/// Simplex-constrained minimizer of `q(v - w) = vᵀHv - 2vᵀb + c` on the
/// support.
struct SupportProblem {
    h: DMatrix<f64>,
    b: DVector<f64>,
    c: f64,
}

impl SupportProblem {
    fn value(&self, v: &DVector<f64>) -> f64 {
        (v.transpose() * &self.h * v)[(0, 0)] - 2.0 * v.dot(&self.b) + self.c
    }

    fn gradient(&self, v: &DVector<f64>) -> DVector<f64> {
        (&self.h * v - &self.b) * 2.0
    }
}

/// Norm of `v - P(v - ∇q)`, zero exactly at a KKT point of the simplex
/// problem.
pub fn kkt_residual<Q: WeightObjective + ?Sized>(
    q: &Q,
    coreset: &Coreset,
    reference: &[f64],
) -> f64 {
    let problem = support_problem(q, &coreset.indices, reference);
    let v = DVector::from_column_slice(&coreset.weights);
    let g = problem.gradient(&v);
    let step: Vec<f64> = (&v - &g).iter().copied().collect();
    (DVector::from_vec(project_simplex(&step)) - v).norm()
}

fn support_problem<Q: WeightObjective + ?Sized>(
    q: &Q,
    idx: &[usize],
    reference: &[f64],
) -> SupportProblem {
    SupportProblem {
        h: q.restricted(idx),
        b: q.cross_terms(reference, idx),
        c: q.value(reference),
    }
}

/// Minimizes `q(w_c - reference)` over convex weights on the coreset's
/// support by projected gradient with exact line search, using
/// Barzilai-Borwein step lengths for the projection. Points whose
/// weight reaches zero are dropped.
pub fn refine_weights<Q: WeightObjective + ?Sized>(
    coreset: &Coreset,
    q: &Q,
    reference: &[f64],
) -> Result<Refinement> {
    if coreset.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot refine an empty coreset".into(),
        ));
    }
    if reference.len() != q.size() {
        return Err(Error::DimensionMismatch {
            expected: q.size(),
            found: reference.len(),
        });
    }
    let problem = support_problem(q, &coreset.indices, reference);
    let lipschitz = 2.0
        * SymmetricEigen::new(problem.h.clone())
            .eigenvalues
            .max()
            .max(0.0);
    let mut v = DVector::from_column_slice(&coreset.weights);
    let mut f = problem.value(&v);
    let mut history = vec![f];
    if lipschitz > 0.0 {
        let mut step = 1.0 / lipschitz;
        let mut g = problem.gradient(&v);
        let mut stalled = 0;
        for _ in 0..MAX_ITER {
            let trial: Vec<f64> = (&v - &g * step).iter().copied().collect();
            let d = DVector::from_vec(project_simplex(&trial)) - &v;
            let curvature = (d.transpose() * &problem.h * &d)[(0, 0)];
            let slope = g.dot(&d);
            if !(curvature > 0.0) || slope >= 0.0 {
                break;
            }
            let gamma = (-slope / (2.0 * curvature)).clamp(0.0, 1.0);
            let next = &v + &d * gamma;
            let f_next = problem.value(&next);
            if f_next > f {
                break;
            }
            let g_next = problem.gradient(&next);
            // Barzilai-Borwein length for the next projection
            let s = &next - &v;
            let sy = s.dot(&(&g_next - &g));
            step = if sy > 0.0 {
                (s.norm_squared() / sy).clamp(1e-3 / lipschitz, 1e6 / lipschitz)
            } else {
                1.0 / lipschitz
            };
            let improvement = f - f_next;
            v = next;
            g = g_next;
            f = f_next;
            history.push(f);
            // a single short step is common with BB lengths, so require a run
            if improvement <= REL_IMPROVEMENT * f.abs().max(f64::MIN_POSITIVE) {
                stalled += 1;
                if stalled == STALL_RUN {
                    break;
                }
            } else {
                stalled = 0;
            }
        }
    }

    let total: f64 = v.iter().filter(|&&x| x > 0.0).sum();
    let (indices, weights): (Vec<usize>, Vec<f64>) = coreset
        .indices
        .iter()
        .zip(v.iter())
        .filter(|(_, &x)| x > 0.0)
        .map(|(&i, &x)| (i, x / total))
        .unzip();
    let mut dense = vec![0.0; coreset.parent().len()];
    for (&i, &w) in indices.iter().zip(&weights) {
        dense[i] = w;
    }
    let mut refined = Coreset::from_dense(
        coreset.parent().clone(),
        &dense,
        coreset.method.clone(),
        coreset.m_target,
    )?
    .with_seed(coreset.seed);
    refined.quad_error = Some(f.max(0.0));
    Ok(Refinement {
        coreset: refined,
        history,
    })
}

//! Entropic optimal transport with squared Euclidean cost.
//!
//! Potentials are iterated in the log domain,
//!
//! ```text
//! φᵢ = -ε log Σⱼ bⱼ exp((ψⱼ - cᵢⱼ)/ε)
//! ψⱼ = -ε log Σᵢ aᵢ exp((φᵢ - cᵢⱼ)/ε)
//! ```
//!
//! and `OT_ε(μ, ν) = ⟨φ, a⟩ + ⟨ψ, b⟩`. A problem whose source and target
//! coincide is solved with the averaged update `φ ← (φ + T(φ))/2`, which does
//! not oscillate, and returns `ψ = φ`.
//!
//! Alternating updates slow to a crawl when the plan splits into weakly
//! coupled blocks. When the residual stalls, a few Newton steps on the
//! semi-dual over the smaller side move the potentials to the fixed point,
//! after which the ordinary updates confirm convergence.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::{sq_dist, DiscreteDistribution, PointCloud};
use crate::error::{Error, Result};
use crate::linalg::SymmetricOperator;

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// Stall checks happen every this many alternating iterations.
const STALL_WINDOW: usize = 20;
/// Newton polishing is skipped when the smaller side exceeds this size.
const NEWTON_MAX_SIDE: usize = 512;
const NEWTON_STEPS: usize = 50;

/// Divergence values in `[-DIVERGENCE_CLAMP, 0)` are reported as zero.
pub const DIVERGENCE_CLAMP: f64 = 1e-7;

/// Iteration controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Bound on the sup-norm change of the potentials between iterations.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

impl SolverOptions {
    pub fn new(tol: f64, max_iter: usize) -> Result<Self> {
        if !(tol.is_finite() && tol > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tolerance must be positive, got {tol}"
            )));
        }
        if max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        Ok(Self { tol, max_iter })
    }

    /// Allowed deviation of the plan marginals at convergence.
    pub fn marginal_tol(&self) -> f64 {
        10.0 * self.tol
    }
}

#[derive(Debug, Clone)]
pub struct SinkhornProblem {
    source: DiscreteDistribution,
    target: DiscreteDistribution,
    epsilon: f64,
}

impl SinkhornProblem {
    pub fn new(
        source: DiscreteDistribution,
        target: DiscreteDistribution,
        epsilon: f64,
    ) -> Result<Self> {
        check_epsilon(epsilon)?;
        if source.cloud().dim() != target.cloud().dim() {
            return Err(Error::DimensionMismatch {
                expected: source.cloud().dim(),
                found: target.cloud().dim(),
            });
        }
        Ok(Self {
            source,
            target,
            epsilon,
        })
    }

    pub fn source(&self) -> &DiscreteDistribution {
        &self.source
    }

    pub fn target(&self) -> &DiscreteDistribution {
        &self.target
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Source and target are the same measure.
    pub fn is_symmetric(&self) -> bool {
        self.source.same_cloud(&self.target) && self.source.weights() == self.target.weights()
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon.is_finite() && epsilon > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )))
    }
}

#[derive(Debug, Clone)]
pub struct SinkhornSolution {
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub ot_value: f64,
    pub iterations: usize,
    /// Sup-norm potential change at the last iteration.
    pub residual: f64,
    /// Per-iteration residuals.
    pub residuals: Vec<f64>,
    /// Index `x₀` with `φ(x₀) = ψ(x₀)` after the constant shift.
    pub anchored_at: usize,
    pub epsilon: f64,
}

impl SinkhornSolution {
    /// Source scaling `u = exp(-φ/ε)`.
    pub fn u(&self) -> Vec<f64> {
        self.phi.iter().map(|p| (-p / self.epsilon).exp()).collect()
    }

    /// Target scaling `v = exp(-ψ/ε)`.
    pub fn v(&self) -> Vec<f64> {
        self.psi.iter().map(|p| (-p / self.epsilon).exp()).collect()
    }

    /// Transport plan `aᵢ bⱼ exp((φᵢ + ψⱼ - cᵢⱼ)/ε)`.
    pub fn plan(&self, problem: &SinkhornProblem) -> DMatrix<f64> {
        let (x, y) = (problem.source.cloud(), problem.target.cloud());
        let (a, b) = (problem.source.weights(), problem.target.weights());
        let eps = self.epsilon;
        DMatrix::from_fn(x.len(), y.len(), |i, j| {
            a[i] * b[j]
                * ((self.phi[i] + self.psi[j] - sq_dist(x.point(i), y.point(j))) / eps).exp()
        })
    }
}

/// Cost matrix scaled by 1/ε, row-major (rows index `x`).
struct ScaledCost {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl ScaledCost {
    fn new(x: &PointCloud, y: &PointCloud, epsilon: f64) -> Self {
        let (rows, cols) = (x.len(), y.len());
        let mut data = vec![0.0; rows * cols];
        data.par_chunks_mut(cols).enumerate().for_each(|(i, row)| {
            let xi = x.point(i);
            for (j, c) in row.iter_mut().enumerate() {
                *c = sq_dist(xi, y.point(j)) / epsilon;
            }
        });
        Self { data, rows, cols }
    }

    fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.rows * self.cols];
        data.par_chunks_mut(self.rows)
            .enumerate()
            .for_each(|(j, row)| {
                for (i, c) in row.iter_mut().enumerate() {
                    *c = self.data[i * self.cols + j];
                }
            });
        Self {
            data,
            rows: self.cols,
            cols: self.rows,
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// `-ε log Σⱼ exp(gⱼ/ε - Cᵢⱼ + log wⱼ)` for every row `i`; the c-transform
/// of `g` against weights `w`.
fn c_transform(cost: &ScaledCost, g: &[f64], log_w: &[f64], epsilon: f64) -> Vec<f64> {
    let shifted: Vec<f64> = g
        .iter()
        .zip(log_w)
        .map(|(g, lw)| g / epsilon + lw)
        .collect();
    (0..cost.rows)
        .into_par_iter()
        .map(|i| {
            let row = cost.row(i);
            let mut max = f64::NEG_INFINITY;
            for (s, c) in shifted.iter().zip(row) {
                max = max.max(s - c);
            }
            let sum: f64 = shifted
                .iter()
                .zip(row)
                .map(|(s, c)| (s - c - max).exp())
                .sum();
            -epsilon * (max + sum.ln())
        })
        .collect()
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Marginal violation implied by `current` when the exact update would give
/// `next`: `max |exp((current - next)/ε) - 1|`.
fn marginal_gap(current: &[f64], next: &[f64], epsilon: f64) -> f64 {
    current
        .iter()
        .zip(next)
        .map(|(c, n)| ((c - n) / epsilon).exp_m1().abs())
        .fold(0.0, f64::max)
}

fn log_weights(w: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|&x| if x > 0.0 { x.ln() } else { f64::NEG_INFINITY })
        .collect()
}

/// Solves the entropic OT problem to a sup-norm potential change below
/// `opts.tol` with marginals within `opts.marginal_tol()`.
pub fn solve(problem: &SinkhornProblem, opts: SolverOptions) -> Result<SinkhornSolution> {
    let opts = SolverOptions::new(opts.tol, opts.max_iter)?;
    if problem.is_symmetric() {
        solve_symmetric(problem.source(), problem.epsilon, opts)
    } else {
        solve_alternating(problem, opts)
    }
}

fn solve_alternating(problem: &SinkhornProblem, opts: SolverOptions) -> Result<SinkhornSolution> {
    let eps = problem.epsilon;
    let (a, b) = (problem.source.weights(), problem.target.weights());
    let cost = ScaledCost::new(problem.source.cloud(), problem.target.cloud(), eps);
    let cost_t = cost.transpose();
    let (log_a, log_b) = (log_weights(a), log_weights(b));

    let mut phi = vec![0.0; a.len()];
    let mut residuals = Vec::new();
    for iter in 1..=opts.max_iter {
        // column marginals are exact for (phi, psi)
        let psi = c_transform(&cost_t, &phi, &log_a, eps);
        let next = c_transform(&cost, &psi, &log_b, eps);
        let residual = sup_diff(&next, &phi);
        residuals.push(residual);
        if residual < opts.tol && marginal_gap(&phi, &next, eps) <= opts.marginal_tol() {
            return Ok(finish(phi, psi, a, b, eps, iter, residuals));
        }
        phi = next;
        if iter % STALL_WINDOW == 0 && stalled(&residuals, opts.tol) {
            phi = polish(problem, &cost, &cost_t, phi, psi);
        }
    }
    Err(Error::NotConverged {
        iterations: opts.max_iter,
        residual: residuals.last().copied().unwrap_or(f64::NAN),
    })
}

/// Whether the recent contraction rate predicts more than another window of
/// iterations before `tol` is reached.
fn stalled(residuals: &[f64], tol: f64) -> bool {
    let k = residuals.len();
    if k < STALL_WINDOW {
        return false;
    }
    let (old, new) = (residuals[k - STALL_WINDOW / 2], residuals[k - 1]);
    if !(new > 0.0 && old > 0.0) || new < tol {
        return false;
    }
    let rate = (new / old).powf(1.0 / (STALL_WINDOW / 2 - 1) as f64);
    rate >= 1.0 || (tol / new).ln() / rate.ln() > STALL_WINDOW as f64
}

/// Newton refinement of the potentials; returns the new source potential.
fn polish(
    problem: &SinkhornProblem,
    cost: &ScaledCost,
    cost_t: &ScaledCost,
    phi: Vec<f64>,
    psi: Vec<f64>,
) -> Vec<f64> {
    let eps = problem.epsilon;
    let (a, b) = (problem.source.weights(), problem.target.weights());
    if b.len() <= a.len() {
        if b.len() > NEWTON_MAX_SIDE {
            return phi;
        }
        let psi = semidual_newton(cost, psi, a, b, eps);
        c_transform(cost, &psi, &log_weights(b), eps)
    } else {
        if a.len() > NEWTON_MAX_SIDE {
            return phi;
        }
        semidual_newton(cost_t, phi, b, a, eps)
    }
}

/// Maximizes `F(g) = ⟨g, b⟩ + ⟨g^c, a⟩` over the column potential `g`, where
/// `g^c` is the c-transform against the rows of `cost`. `F` is concave with
/// gradient `b - Pᵀa` for the row-normalized kernel `P`.
fn semidual_newton(cost: &ScaledCost, mut g: Vec<f64>, a: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let log_b = log_weights(b);
    let cols: Vec<usize> = (0..b.len()).filter(|&j| b[j] > 0.0).collect();
    let k = cols.len();
    let objective = |g: &[f64], f: &[f64]| dot_finite(g, b) + dot_finite(f, a);
    let mut f = c_transform(cost, &g, &log_b, eps);
    let mut value = objective(&g, &f);
    for _ in 0..NEWTON_STEPS {
        // rows of P scaled by √aᵢ, restricted to positive column weights
        let mut sp = DMatrix::<f64>::zeros(cost.rows, k);
        let mut col_mass = DVector::<f64>::zeros(k);
        for i in (0..cost.rows).filter(|&i| a[i] > 0.0) {
            let row = cost.row(i);
            for (c, &j) in cols.iter().enumerate() {
                let p = ((f[i] + g[j]) / eps - row[j] + log_b[j]).exp();
                sp[(i, c)] = a[i].sqrt() * p;
                col_mass[c] += a[i] * p;
            }
        }
        let grad: DVector<f64> =
            DVector::from_iterator(k, cols.iter().enumerate().map(|(c, &j)| b[j] - col_mass[c]));
        let gap = cols
            .iter()
            .enumerate()
            .map(|(c, &j)| (grad[c] / b[j]).abs())
            .fold(0.0, f64::max);
        if gap < 1e-14 {
            break;
        }
        let mut hess = -(sp.transpose() * &sp);
        for c in 0..k {
            hess[(c, c)] += col_mass[c];
        }
        hess /= eps;
        // the constant direction is a null vector; pin it
        let pin = hess.trace() / k as f64;
        hess.add_scalar_mut(pin / k as f64);
        let Some(chol) = hess.cholesky() else { break };
        let step = chol.solve(&grad);
        let slope = grad.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let mut trial = g.clone();
            for (c, &j) in cols.iter().enumerate() {
                trial[j] += t * step[c];
            }
            let tf = c_transform(cost, &trial, &log_b, eps);
            let tv = objective(&trial, &tf);
            if tv >= value + 1e-4 * t * slope {
                accepted = tv > value;
                g = trial;
                f = tf;
                value = tv;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    g
}

fn solve_symmetric(
    mu: &DiscreteDistribution,
    epsilon: f64,
    opts: SolverOptions,
) -> Result<SinkhornSolution> {
    let (phi, iterations, residuals) = symmetric_potential(mu, epsilon, opts)?;
    let w = mu.weights();
    Ok(finish(
        phi.clone(),
        phi,
        w,
        w,
        epsilon,
        iterations,
        residuals,
    ))
}

/// Damped fixed-point iteration for the self-transport potential.
fn symmetric_potential(
    mu: &DiscreteDistribution,
    epsilon: f64,
    opts: SolverOptions,
) -> Result<(Vec<f64>, usize, Vec<f64>)> {
    let cost = ScaledCost::new(mu.cloud(), mu.cloud(), epsilon);
    let log_a = log_weights(mu.weights());
    let mut phi = vec![0.0; mu.len()];
    let mut residuals = Vec::new();
    for iter in 1..=opts.max_iter {
        let t = c_transform(&cost, &phi, &log_a, epsilon);
        let residual = 0.5 * sup_diff(&t, &phi);
        residuals.push(residual);
        if residual < opts.tol && marginal_gap(&phi, &t, epsilon) <= opts.marginal_tol() {
            return Ok((phi, iter, residuals));
        }
        phi.iter_mut()
            .zip(&t)
            .for_each(|(p, t)| *p = 0.5 * (*p + t));
    }
    Err(Error::NotConverged {
        iterations: opts.max_iter,
        residual: residuals.last().copied().unwrap_or(f64::NAN),
    })
}

fn finish(
    mut phi: Vec<f64>,
    mut psi: Vec<f64>,
    a: &[f64],
    b: &[f64],
    epsilon: f64,
    iterations: usize,
    residuals: Vec<f64>,
) -> SinkhornSolution {
    let shift = 0.5 * (psi[0] - phi[0]);
    phi.iter_mut().for_each(|p| *p += shift);
    psi.iter_mut().for_each(|p| *p -= shift);
    let ot_value = dot_finite(&phi, a) + dot_finite(&psi, b);
    SinkhornSolution {
        phi,
        psi,
        ot_value,
        iterations,
        residual: residuals.last().copied().unwrap_or(0.0),
        residuals,
        anchored_at: 0,
        epsilon,
    }
}

/// `Σ pᵢ wᵢ` skipping zero weights.
fn dot_finite(p: &[f64], w: &[f64]) -> f64 {
    p.iter()
        .zip(w)
        .filter(|(_, &w)| w > 0.0)
        .map(|(p, w)| p * w)
        .sum()
}

/// Largest deviation of the plan's row and column sums from the marginals,
/// relative to the marginal weight.
pub fn marginal_residual(problem: &SinkhornProblem, sol: &SinkhornSolution) -> f64 {
    let plan = sol.plan(problem);
    let (a, b) = (problem.source.weights(), problem.target.weights());
    let rows = plan.column_sum();
    let cols = plan.row_sum();
    let row_err = a
        .iter()
        .zip(rows.iter())
        .filter(|(&w, _)| w > 0.0)
        .map(|(w, s)| (s / w - 1.0).abs());
    let col_err = b
        .iter()
        .zip(cols.iter())
        .filter(|(&w, _)| w > 0.0)
        .map(|(w, s)| (s / w - 1.0).abs());
    row_err.chain(col_err).fold(0.0, f64::max)
}

/// `OT_ε(μ, ν)`.
pub fn ot_value(
    mu: &DiscreteDistribution,
    nu: &DiscreteDistribution,
    epsilon: f64,
    opts: SolverOptions,
) -> Result<f64> {
    Ok(solve(
        &SinkhornProblem::new(mu.clone(), nu.clone(), epsilon)?,
        opts,
    )?
    .ot_value)
}

fn combine(cross: f64, self_mu: f64, self_nu: f64) -> f64 {
    let s = cross - 0.5 * (self_mu + self_nu);
    if (-DIVERGENCE_CLAMP..0.0).contains(&s) {
        0.0
    } else {
        if s < 0.0 {
            log::warn!("Sinkhorn divergence {s:e} is negative beyond roundoff");
        }
        s
    }
}

/// Debiased Sinkhorn divergence
/// `S(μ, ν) = OT_ε(μ, ν) - (OT_ε(μ, μ) + OT_ε(ν, ν))/2`.
pub fn divergence(
    mu: &DiscreteDistribution,
    nu: &DiscreteDistribution,
    epsilon: f64,
    opts: SolverOptions,
) -> Result<f64> {
    Ok(combine(
        ot_value(mu, nu, epsilon, opts)?,
        ot_value(mu, mu, epsilon, opts)?,
        ot_value(nu, nu, epsilon, opts)?,
    ))
}

/// Divergence against a fixed reference, caching `OT_ε(ref, ref)`.
#[derive(Debug, Clone)]
pub struct DivergenceFrom {
    reference: DiscreteDistribution,
    self_ot: f64,
    epsilon: f64,
    opts: SolverOptions,
}

impl DivergenceFrom {
    pub fn new(reference: DiscreteDistribution, epsilon: f64, opts: SolverOptions) -> Result<Self> {
        let self_ot = ot_value(&reference, &reference, epsilon, opts)?;
        Ok(Self {
            reference,
            self_ot,
            epsilon,
            opts,
        })
    }

    /// Reuses a self-plan already solved for the reference.
    pub fn from_plan(
        reference: DiscreteDistribution,
        plan: &SelfPlan,
        opts: SolverOptions,
    ) -> Self {
        let self_ot = 2.0 * dot_finite(&plan.potential, reference.weights());
        Self {
            reference,
            self_ot,
            epsilon: plan.epsilon,
            opts,
        }
    }

    pub fn reference(&self) -> &DiscreteDistribution {
        &self.reference
    }

    /// `S(ref, ν)`; `ν` is compacted to its support first.
    pub fn to(&self, nu: &DiscreteDistribution) -> Result<f64> {
        let nu = nu.compact()?;
        let cross = ot_value(&self.reference, &nu, self.epsilon, self.opts)?;
        let own = ot_value(&nu, &nu, self.epsilon, self.opts)?;
        Ok(combine(cross, self.self_ot, own))
    }
}

/// Entropic self-transport plan `π = [aᵢ aⱼ exp((φᵢ + φⱼ - cᵢⱼ)/ε)]`.
#[derive(Debug, Clone)]
pub struct SelfPlan {
    plan: DMatrix<f64>,
    weights: Vec<f64>,
    potential: Vec<f64>,
    epsilon: f64,
    cloud: Arc<PointCloud>,
    pub iterations: usize,
}

impl SelfPlan {
    pub fn plan(&self) -> &DMatrix<f64> {
        &self.plan
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn potential(&self) -> &[f64] {
        &self.potential
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn cloud(&self) -> &Arc<PointCloud> {
        &self.cloud
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `OT_ε(μ, μ)`.
    pub fn self_ot(&self) -> f64 {
        2.0 * dot_finite(&self.potential, &self.weights)
    }

    /// `D^{-1/2} π D^{-1/2}` with `D = diag(a)`; this is `n·π` for uniform
    /// weights. Its spectrum lies in `[0, 1]` with top eigenvector `√a`.
    pub fn normalized(&self) -> DMatrix<f64> {
        let s: Vec<f64> = self
            .weights
            .iter()
            .map(|w| if *w > 0.0 { 1.0 / w.sqrt() } else { 0.0 })
            .collect();
        DMatrix::from_fn(self.len(), self.len(), |i, j| {
            self.plan[(i, j)] * s[i] * s[j]
        })
    }

    /// Density `ξᵢⱼ = πᵢⱼ / (aᵢ aⱼ)` of the plan against the product measure.
    pub fn density(&self) -> DMatrix<f64> {
        let s: Vec<f64> = self
            .weights
            .iter()
            .map(|w| if *w > 0.0 { 1.0 / w } else { 0.0 })
            .collect();
        DMatrix::from_fn(self.len(), self.len(), |i, j| {
            self.plan[(i, j)] * s[i] * s[j]
        })
    }
}

impl SymmetricOperator for SelfPlan {
    fn dim(&self) -> usize {
        self.len()
    }

    fn apply_block(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.plan.apply_block(x)
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.plan.apply(v)
    }

    fn diagonal(&self) -> Option<DVector<f64>> {
        Some(self.plan.diagonal())
    }
}

/// Solves the symmetric problem for `μ` and materializes its plan.
pub fn self_plan(mu: &DiscreteDistribution, epsilon: f64, opts: SolverOptions) -> Result<SelfPlan> {
    check_epsilon(epsilon)?;
    let opts = SolverOptions::new(opts.tol, opts.max_iter)?;
    let (potential, iterations, _) = symmetric_potential(mu, epsilon, opts)?;
    let cloud = mu.cloud();
    let a = mu.weights();
    let n = mu.len();
    let mut data = vec![0.0; n * n];
    data.par_chunks_mut(n).enumerate().for_each(|(j, col)| {
        let xj = cloud.point(j);
        for (i, c) in col.iter_mut().enumerate() {
            *c = if i == j {
                a[i] * a[i] * (2.0 * potential[i] / epsilon).exp()
            } else {
                a[i] * a[j]
                    * ((potential[i] + potential[j] - sq_dist(cloud.point(i), xj)) / epsilon).exp()
            };
        }
    });
    // mirror the upper triangle so the matrix is exactly symmetric
    let mut plan = DMatrix::from_vec(n, n, data);
    for j in 0..n {
        for i in (j + 1)..n {
            plan[(i, j)] = plan[(j, i)];
        }
    }
    Ok(SelfPlan {
        plan,
        weights: a.to_vec(),
        potential,
        epsilon,
        cloud: mu.shared_cloud().clone(),
        iterations,
    })
}

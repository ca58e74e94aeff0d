//! Carathéodory recombination.
//!
//! Starting from a discrete distribution, walk along directions that are
//! orthogonal to a set of moment functions and to the constant function,
//! each time stepping until one more weight hits zero. Every matched moment
//! and the total mass are conserved exactly, and the weights stay convex.
//!
//! Directions come from a window of live points: with `p` conserved columns,
//! `2p` points carry at least `p` null directions of their moment matrix,
//! found by one Householder QR and then spent one elimination at a time.
//! Eliminated points leave the window and fresh ones enter, so the cost per
//! elimination is `O(p²)` regardless of the input size.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{DiscreteDistribution, PointCloud};
use crate::error::{Error, Result};
use crate::linalg::PivotedQr;

/// Relative threshold for linear independence of moment columns.
const RANK_TOL: f64 = 1e-10;
/// Weights this negative after a step are treated as roundoff and snapped to zero.
const SNAP_TOL: f64 = 1e-12;
/// Anything more negative is a defect.
const NEGATIVE_TOL: f64 = 1e-8;

/// Columns of functions whose moments a coreset must reproduce.
#[derive(Debug, Clone)]
pub struct MomentSystem {
    basis: DMatrix<f64>,
}

impl MomentSystem {
    pub fn new(basis: DMatrix<f64>) -> Result<Self> {
        if basis.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(
                "moment columns must be finite".into(),
            ));
        }
        Ok(Self { basis })
    }

    /// `[1, U]`, optionally followed by `extra`.
    pub fn with_mass(u: &DMatrix<f64>, extra: Option<&[f64]>) -> Result<Self> {
        let n = u.nrows();
        let p = 1 + u.ncols() + extra.is_some() as usize;
        let mut basis = DMatrix::zeros(n, p);
        basis.column_mut(0).fill(1.0);
        basis.columns_mut(1, u.ncols()).copy_from(u);
        if let Some(e) = extra {
            if e.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: e.len(),
                });
            }
            basis.set_column(p - 1, &DVector::from_column_slice(e));
        }
        Self::new(basis)
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn len(&self) -> usize {
        self.basis.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.nrows() == 0
    }

    pub fn columns(&self) -> usize {
        self.basis.ncols()
    }

    /// `max_k |Σᵢ basis[i,k] (a[i] - b[i])|`.
    pub fn residual(&self, a: &[f64], b: &[f64]) -> f64 {
        let diff = DVector::from_iterator(a.len(), a.iter().zip(b).map(|(x, y)| x - y));
        (self.basis.transpose() * diff).amax()
    }

    fn restricted(&self, rows: &[usize]) -> DMatrix<f64> {
        self.basis.select_rows(rows)
    }
}

/// Indices into the parent cloud with convex weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Coreset {
    #[serde(skip)]
    parent: Option<Arc<PointCloud>>,
    /// Sorted, distinct.
    pub indices: Vec<usize>,
    /// Strictly positive, summing to one.
    pub weights: Vec<f64>,
    pub method: String,
    pub m_target: usize,
    pub seed: u64,
    /// Quadratic-form error against the input distribution, when evaluated.
    pub quad_error: Option<f64>,
}

impl Coreset {
    /// Collects the strictly positive entries of dense weights.
    pub fn from_dense(
        parent: Arc<PointCloud>,
        dense: &[f64],
        method: impl Into<String>,
        m_target: usize,
    ) -> Result<Self> {
        if dense.len() != parent.len() {
            return Err(Error::DimensionMismatch {
                expected: parent.len(),
                found: dense.len(),
            });
        }
        let (indices, weights): (Vec<usize>, Vec<f64>) = dense
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(i, &w)| (i, w))
            .unzip();
        let c = Self {
            parent: Some(parent),
            indices,
            weights,
            method: method.into(),
            m_target,
            seed: 0,
            quad_error: None,
        };
        c.check_convex()?;
        Ok(c)
    }

    /// Rebuilds a coreset read back from disk against its parent cloud.
    pub fn attach(mut self, parent: Arc<PointCloud>) -> Result<Self> {
        if let Some(&i) = self.indices.iter().find(|&&i| i >= parent.len()) {
            return Err(Error::InvalidArgument(format!(
                "index {i} out of range for n={}",
                parent.len()
            )));
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "coreset indices must be sorted and distinct".into(),
            ));
        }
        self.parent = Some(parent);
        self.check_convex()?;
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_method(mut self, method: impl Into<String>) -> Self {
        self.method = method.into();
        self
    }

    fn check_convex(&self) -> Result<()> {
        if self.weights.len() != self.indices.len() {
            return Err(Error::DimensionMismatch {
                expected: self.indices.len(),
                found: self.weights.len(),
            });
        }
        if self.weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidWeights(
                "coreset weights must be positive".into(),
            ));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidWeights(format!(
                "coreset weights sum to {total}"
            )));
        }
        Ok(())
    }

    pub fn parent(&self) -> &Arc<PointCloud> {
        self.parent
            .as_ref()
            .expect("coreset is attached to its parent cloud")
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Weights as a length-n vector over the parent cloud.
    pub fn dense_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.parent().len()];
        for (&i, &x) in self.indices.iter().zip(&self.weights) {
            w[i] = x;
        }
        w
    }

    /// The coreset as a distribution over the full parent cloud.
    pub fn to_distribution(&self) -> Result<DiscreteDistribution> {
        DiscreteDistribution::normalized(self.parent().clone(), self.dense_weights())
    }

    /// The coreset as a distribution over its own points only.
    pub fn support_distribution(&self) -> Result<DiscreteDistribution> {
        let cloud = Arc::new(self.parent().select(&self.indices)?);
        DiscreteDistribution::normalized(cloud, self.weights.clone())
    }
}

/// Outcome of the elimination phase.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EliminationStats {
    pub steps: usize,
    /// Complement factorizations performed.
    pub windows: usize,
    /// Numerical rank of the conserved system on the initial support.
    pub rank: usize,
    pub columns: usize,
}

impl EliminationStats {
    pub fn rank_deficient(&self) -> bool {
        self.rank < self.columns
    }
}

/// Step-by-step support reduction conserving the moments of a [`MomentSystem`].
///
/// Works on a window of up to `2p` live points, `p` being the number of
/// conserved columns. The orthogonal complement of the window's moment
/// matrix is computed once per window; after each elimination the remaining
/// complement directions are updated by Gaussian elimination so that they
/// vanish on the removed point. When the directions run out, eliminated
/// points leave the window and fresh ones enter.
struct Eliminator<'a> {
    system: &'a MomentSystem,
    weights: Vec<f64>,
    /// Global index of each local row of `basis`.
    window: Vec<usize>,
    alive: Vec<bool>,
    /// Live points outside the window, next one last.
    pending: Vec<usize>,
    n_alive: usize,
    /// Complement directions over `window`.
    basis: DMatrix<f64>,
    active: Vec<usize>,
    exhausted: bool,
    stats: EliminationStats,
}

impl<'a> Eliminator<'a> {
    /// Points enter the window in `order`, which must list every point once.
    fn new(system: &'a MomentSystem, weights: Vec<f64>, order: &[usize]) -> Self {
        let support: Vec<usize> = weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(i, _)| i)
            .collect();
        let rank = PivotedQr::new(&system.restricted(&support), RANK_TOL).rank;
        Self {
            system,
            n_alive: support.len(),
            window: Vec::new(),
            alive: Vec::new(),
            pending: order
                .iter()
                .rev()
                .copied()
                .filter(|&i| weights[i] > 0.0)
                .collect(),
            weights,
            basis: DMatrix::zeros(0, 0),
            active: Vec::new(),
            exhausted: false,
            stats: EliminationStats {
                rank,
                columns: system.columns(),
                ..Default::default()
            },
        }
    }

    fn exhausted(&self) -> bool {
        self.exhausted
    }

    /// Drops dead rows, tops the window up and recomputes its complement.
    /// Returns `false` when the window is unchanged and has no direction left.
    fn refill(&mut self) -> bool {
        let before = self.window.len();
        let mut window: Vec<usize> = self
            .window
            .iter()
            .zip(&self.alive)
            .filter(|(_, &a)| a)
            .map(|(&g, _)| g)
            .collect();
        let shrunk = window.len() < before;
        let cap = 2 * self.system.columns().max(1);
        let mut grew = false;
        while window.len() < cap {
            match self.pending.pop() {
                Some(i) => {
                    window.push(i);
                    grew = true;
                }
                None => break,
            }
        }
        if !(shrunk || grew) && before > 0 {
            return false;
        }
        let a = self.system.restricted(&window);
        // with more points than columns the complement is nonempty whatever
        // the rank, and an exact factorization keeps every column conserved
        let tol = if window.len() > self.system.columns() {
            0.0
        } else {
            RANK_TOL
        };
        self.basis = PivotedQr::new(&a, tol).complement();
        self.active = (0..self.basis.ncols()).collect();
        self.alive = vec![true; window.len()];
        self.window = window;
        self.stats.windows += 1;
        !self.active.is_empty()
    }

    /// Eliminates at least one point. Returns `false` when no direction is left.
    fn step(&mut self) -> Result<bool> {
        if self.exhausted {
            return Ok(false);
        }
        loop {
            let Some(&c) = self.active.first() else {
                if !self.refill() {
                    self.exhausted = true;
                    return Ok(false);
                }
                continue;
            };
            let Some((alpha, binding)) = self.ratio_test(c) else {
                // direction vanished on the remaining rows
                self.active.remove(0);
                continue;
            };
            self.apply(c, alpha, binding)?;
            self.stats.steps += 1;
            return Ok(true);
        }
    }

    /// Smallest-magnitude step along column `c` that zeroes a weight while
    /// keeping the rest nonnegative; both signs are considered.
    fn ratio_test(&self, c: usize) -> Option<(f64, usize)> {
        let col = self.basis.column(c);
        let scale = col.amax();
        if scale == 0.0 {
            return None;
        }
        let mut best: Option<(f64, usize)> = None;
        for (r, &g) in self.window.iter().enumerate() {
            let v = col[r];
            if !self.alive[r] || v.abs() <= 1e-14 * scale {
                continue;
            }
            let alpha = self.weights[g] / v;
            match best {
                Some((b, _))
                    if alpha.abs() > b.abs() || (alpha.abs() == b.abs() && alpha < 0.0) => {}
                _ => best = Some((alpha, r)),
            }
        }
        best
    }

    fn apply(&mut self, c: usize, alpha: f64, binding: usize) -> Result<()> {
        let mut zeroed = vec![binding];
        for r in 0..self.window.len() {
            if !self.alive[r] {
                continue;
            }
            let g = self.window[r];
            let old = self.weights[g];
            let new = old - alpha * self.basis[(r, c)];
            if r == binding {
                self.weights[g] = 0.0;
            } else if new <= SNAP_TOL * old.max(1e-300) || new <= 0.0 {
                if new < -NEGATIVE_TOL {
                    return Err(Error::Recombination(format!(
                        "weight {new:e} went negative at point {g}"
                    )));
                }
                self.weights[g] = 0.0;
                zeroed.push(r);
            } else {
                self.weights[g] = new;
            }
        }
        for &r in &zeroed {
            self.alive[r] = false;
            self.n_alive -= 1;
        }
        // eliminate each removed row from the remaining directions, consuming
        // one direction per row
        let mut pivot = Some(c);
        for &r in &zeroed {
            let p = pivot.take().or_else(|| {
                self.active
                    .iter()
                    .copied()
                    .filter(|&j| self.basis[(r, j)] != 0.0)
                    .max_by(|&i, &j| {
                        self.basis[(r, i)]
                            .abs()
                            .total_cmp(&self.basis[(r, j)].abs())
                    })
            });
            let Some(p) = p else { continue };
            self.active.retain(|&j| j != p);
            let pv = self.basis[(r, p)];
            for &j in &self.active {
                let f = self.basis[(r, j)] / pv;
                if f == 0.0 {
                    continue;
                }
                for k in 0..self.window.len() {
                    if self.alive[k] {
                        self.basis[(k, j)] -= f * self.basis[(k, p)];
                    }
                }
                self.basis[(r, j)] = 0.0;
            }
        }
        // removed rows must not leak into later directions
        for &r in &zeroed {
            for &j in &self.active {
                self.basis[(r, j)] = 0.0;
            }
        }
        Ok(())
    }
}

fn check_inputs(input: &DiscreteDistribution, u: &DMatrix<f64>) -> Result<()> {
    if u.nrows() != input.len() {
        return Err(Error::DimensionMismatch {
            expected: input.len(),
            found: u.nrows(),
        });
    }
    Ok(())
}

fn check_order(order: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in order {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidArgument(format!(
                "visiting order is not a permutation of 0..{n}"
            )));
        }
    }
    if order.len() != n {
        return Err(Error::InvalidArgument(format!(
            "visiting order has {} entries, expected {n}",
            order.len()
        )));
    }
    Ok(())
}

fn tag(method: &str, stats: &EliminationStats) -> String {
    if stats.rank_deficient() {
        format!("{method}[rank {}/{}]", stats.rank, stats.columns)
    } else {
        method.to_string()
    }
}

/// Result of [`recombine`] with diagnostics.
#[derive(Debug, Clone)]
pub struct Recombination {
    pub coreset: Coreset,
    pub stats: EliminationStats,
    /// `Σ k_diag (w_input - w_coreset)`; nonnegative up to roundoff.
    pub diagonal_gap: f64,
}

/// Reduces `input` to at most `m = U.ncols() + 1` points while matching the
/// moments of every column of `u` and the total mass.
///
/// `k_diag` joins the conserved system during elimination. The last point is
/// removed along the null direction of `[1, U]` on the remaining support,
/// oriented so that the coreset's `k_diag` moment does not exceed the
/// input's.
pub fn recombine(
    input: &DiscreteDistribution,
    u: &DMatrix<f64>,
    k_diag: &[f64],
) -> Result<Recombination> {
    let order: Vec<usize> = (0..input.len()).collect();
    recombine_ordered(input, u, k_diag, &order)
}

/// [`recombine`] with points visited in `order`, a permutation of the input
/// indices. Different orders reach different coresets with the same
/// guarantees.
pub fn recombine_ordered(
    input: &DiscreteDistribution,
    u: &DMatrix<f64>,
    k_diag: &[f64],
    order: &[usize],
) -> Result<Recombination> {
    check_inputs(input, u)?;
    check_order(order, input.len())?;
    let m = u.ncols() + 1;
    let conserved = MomentSystem::with_mass(u, Some(k_diag))?;
    let mut elim = Eliminator::new(&conserved, input.weights().to_vec(), order);
    if elim.n_alive > m {
        while elim.n_alive > m && !elim.exhausted() {
            if !elim.step()? {
                break;
            }
        }
    }
    let mut weights = elim.weights;
    let stats = elim.stats;

    let support: Vec<usize> = weights
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(i, _)| i)
        .collect();
    if support.len() > m {
        let terminal = MomentSystem::with_mass(u, None)?.restricted(&support);
        let qr = PivotedQr::new(&terminal, RANK_TOL);
        if let Some(mut dir) = qr.null_vector() {
            let along: f64 = support
                .iter()
                .zip(dir.iter())
                .map(|(&i, d)| k_diag[i] * d)
                .sum();
            if along < 0.0 {
                dir.neg_mut();
            }
            let (alpha, binding) = support
                .iter()
                .zip(dir.iter())
                .enumerate()
                .filter(|(_, (_, &d))| d > 1e-14 * dir.amax())
                .map(|(r, (&i, &d))| (weights[i] / d, r))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .ok_or_else(|| {
                    Error::Recombination("terminal direction has no positive entry".into())
                })?;
            for (r, (&i, &d)) in support.iter().zip(dir.iter()).enumerate() {
                let new = weights[i] - alpha * d;
                if r == binding || new <= SNAP_TOL * weights[i] {
                    if new < -NEGATIVE_TOL {
                        return Err(Error::Recombination(format!(
                            "weight {new:e} went negative at point {i}"
                        )));
                    }
                    weights[i] = 0.0;
                } else {
                    weights[i] = new;
                }
            }
        }
    }

    let diagonal_gap: f64 = input
        .weights()
        .iter()
        .zip(&weights)
        .zip(k_diag)
        .map(|((a, b), k)| k * (a - b))
        .sum();
    let coreset = Coreset::from_dense(
        input.shared_cloud().clone(),
        &weights,
        tag("recombination", &stats),
        m,
    )?;
    Ok(Recombination {
        coreset,
        stats,
        diagonal_gap,
    })
}

/// Quadratic error `(μ - ℙₙ)ᵀ K (μ - ℙₙ)` used by [`sweep`].
pub trait QuadraticError {
    fn error(&self, diff: &[f64]) -> f64;
}

impl<F: Fn(&[f64]) -> f64> QuadraticError for F {
    fn error(&self, diff: &[f64]) -> f64 {
        self(diff)
    }
}

/// Trace of a [`sweep`]: support size and error after each elimination.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub coreset: Coreset,
    pub stats: EliminationStats,
    /// `(support size, error)` after each elimination, including the one
    /// that crossed the threshold.
    pub trace: Vec<(usize, f64)>,
    /// Whether the threshold stopped the sweep before the complement ran out.
    pub threshold_hit: bool,
}

/// Single-pass choice of coreset size: eliminates along the complement of
/// `[1, U]` with `U` the leading `m_max - 1` columns of `u`, and returns the
/// last iterate whose quadratic error stays within `tau`.
pub fn sweep<Q: QuadraticError + ?Sized>(
    input: &DiscreteDistribution,
    u: &DMatrix<f64>,
    quad: &Q,
    m_max: usize,
    tau: f64,
) -> Result<SweepResult> {
    if m_max < 2 {
        return Err(Error::InvalidArgument("m_max must be at least 2".into()));
    }
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tau must be nonnegative, got {tau}"
        )));
    }
    check_inputs(input, u)?;
    let k = (m_max - 1).min(u.ncols());
    let conserved = MomentSystem::with_mass(&u.columns(0, k).clone_owned(), None)?;
    let base = input.weights().to_vec();
    let order: Vec<usize> = (0..input.len()).collect();
    let mut elim = Eliminator::new(&conserved, base.clone(), &order);
    let mut prev = base.clone();
    let mut trace = Vec::new();
    let mut threshold_hit = false;
    loop {
        let snapshot = elim.weights.clone();
        if !elim.step()? {
            break;
        }
        let diff: Vec<f64> = elim.weights.iter().zip(&base).map(|(a, b)| a - b).collect();
        let err = quad.error(&diff);
        trace.push((elim.n_alive, err));
        if err > tau {
            prev = snapshot;
            threshold_hit = true;
            break;
        }
        prev = elim.weights.clone();
    }
    let stats = elim.stats;
    let coreset = Coreset::from_dense(
        input.shared_cloud().clone(),
        &prev,
        tag("recombination-sweep", &stats),
        m_max,
    )?;
    Ok(SweepResult {
        coreset,
        stats,
        trace,
        threshold_hit,
    })
}

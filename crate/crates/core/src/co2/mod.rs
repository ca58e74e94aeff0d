//! The compression pipeline: kernel selection for the Sinkhorn divergence,
//! eigen-moment recombination, threshold selection, weight refinement and
//! baselines.

mod baselines;
mod form;
mod refine;
mod tau;

use serde::{Deserialize, Serialize};

pub use baselines::{herding, random_subset};
pub use form::{
    hutchinson_diag, QuadMode, SinkhornQuadraticForm, WeightObjective, UNIT_EIGENVALUE,
};
pub use refine::{kkt_residual, refine_weights, Refinement, MAX_ITER as REFINE_MAX_ITER};
pub use tau::{default_beta, select_tau, DEFAULT_DRAWS, MIN_DRAWS};

use crate::data::DiscreteDistribution;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::lowrank::{nystrom, PsdFactor};
use crate::recombination::{recombine_ordered, sweep, Coreset, EliminationStats, Recombination};
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::sinkhorn::{self_plan, DivergenceFrom, SelfPlan, SolverOptions};

pub const DEFAULT_THETA: usize = 3;

/// Recombination runs per fixed-size compression; the one with the smallest
/// quadratic error is kept.
pub const DEFAULT_RESTARTS: usize = 32;

/// Relative errors are reported as this when the divergence vanishes.
pub const DEGENERATE_RATIO: f64 = f64::INFINITY;

/// Divergences below this are treated as zero by [`quad_approx_error`].
pub const DIVERGENCE_FLOOR: f64 = 1e-12;

/// How the coreset size is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeRule {
    Fixed {
        m: usize,
    },
    /// Sweep until the quadratic error exceeds `tau`, or `q_β/n` when
    /// `tau` is absent. `m_max` bounds the factor rank.
    Tolerance {
        tau: Option<f64>,
        beta: Option<f64>,
        m_max: usize,
    },
}

impl SizeRule {
    /// Rank of the factor the rule needs.
    pub fn rank(&self) -> usize {
        match *self {
            SizeRule::Fixed { m } => m,
            SizeRule::Tolerance { m_max, .. } => m_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Co2Config {
    pub epsilon: f64,
    pub size: SizeRule,
    pub theta: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
    pub mode: QuadMode,
    pub tau_draws: usize,
    /// Visiting orders tried by fixed-size recombination, at least one.
    pub restarts: usize,
}

impl Co2Config {
    pub fn fixed(epsilon: f64, m: usize) -> Self {
        Self::with_size(epsilon, SizeRule::Fixed { m })
    }

    pub fn tolerance(epsilon: f64, tau: Option<f64>, beta: Option<f64>, m_max: usize) -> Self {
        Self::with_size(epsilon, SizeRule::Tolerance { tau, beta, m_max })
    }

    fn with_size(epsilon: f64, size: SizeRule) -> Self {
        let solver = SolverOptions::default();
        Self {
            epsilon,
            size,
            theta: DEFAULT_THETA,
            seed: 0,
            tol: solver.tol,
            max_iter: solver.max_iter,
            mode: QuadMode::XiFast,
            tau_draws: DEFAULT_DRAWS,
            restarts: DEFAULT_RESTARTS,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_theta(mut self, theta: usize) -> Self {
        self.theta = theta;
        self
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn with_mode(mut self, mode: QuadMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn solver(&self) -> Result<SolverOptions> {
        SolverOptions::new(self.tol, self.max_iter)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.theta < 2 {
            return Err(Error::InvalidArgument(format!(
                "oversampling factor must be at least 2, got {}",
                self.theta
            )));
        }
        self.solver()?;
        if self.restarts == 0 {
            return Err(Error::InvalidArgument(
                "at least one recombination run is required".into(),
            ));
        }
        match self.size {
            SizeRule::Fixed { m } if m == 0 => Err(Error::InvalidArgument(
                "coreset size must be positive".into(),
            )),
            SizeRule::Tolerance { m_max, .. } if m_max < 2 => {
                Err(Error::InvalidArgument("m_max must be at least 2".into()))
            }
            SizeRule::Tolerance { tau: Some(t), .. } if t.is_nan() || t < 0.0 => Err(
                Error::InvalidArgument(format!("tau must be nonnegative, got {t}")),
            ),
            SizeRule::Tolerance { beta: Some(b), .. } if !(b > 0.0 && b < 1.0) => Err(
                Error::InvalidArgument(format!("beta must lie in (0, 1), got {b}")),
            ),
            SizeRule::Tolerance { tau: None, .. } if self.tau_draws < MIN_DRAWS => Err(
                Error::InvalidArgument(format!("at least {MIN_DRAWS} draws are required")),
            ),
            _ => Ok(()),
        }
    }
}

/// Solves the self-problem for `data` and factors its normalized plan with
/// a sketch of width `θ·rank`.
pub fn kernel_selection(
    data: &DiscreteDistribution,
    config: &Co2Config,
) -> Result<SinkhornQuadraticForm> {
    config.validate()?;
    let plan = self_plan(data, config.epsilon, config.solver()?)?;
    form_from_plan(plan, config)
}

/// Factors an already solved self-plan. Lets one plan serve several
/// coreset sizes.
pub fn form_from_plan(plan: SelfPlan, config: &Co2Config) -> Result<SinkhornQuadraticForm> {
    config.validate()?;
    if (plan.epsilon() - config.epsilon).abs() > 1e-12 * config.epsilon {
        return Err(Error::InvalidArgument(format!(
            "plan was solved at epsilon {} but the configuration asks for {}",
            plan.epsilon(),
            config.epsilon
        )));
    }
    let n = plan.len();
    let rank = config.size.rank().clamp(1, n);
    let width = (config.theta * rank).min(n);
    let factor = deflated_factor(
        &plan,
        rank,
        width,
        derive_seed(config.seed, stream::SKETCH, 0),
    )?;
    SinkhornQuadraticForm::new(config.mode, plan, factor)
}

/// Rank-`rank` factor of the normalized plan. Its top eigenpair `(1, √a)`
/// is known in closed form, so only the deflated remainder is sketched.
fn deflated_factor(plan: &SelfPlan, rank: usize, width: usize, seed: u64) -> Result<PsdFactor> {
    let n = plan.len();
    let top = DVector::from_iterator(n, plan.weights().iter().map(|a| a.sqrt()));
    let rest = if rank > 1 {
        let deflated = plan.normalized() - &top * top.transpose();
        nystrom(&deflated, rank - 1, width, seed)?
    } else {
        PsdFactor {
            u: DMatrix::zeros(n, 0),
            lambda: Vec::new(),
            sketch_width: 0,
            nu_shift: 0.0,
        }
    };
    let mut u = DMatrix::zeros(n, rest.rank() + 1);
    u.set_column(0, &top);
    u.columns_mut(1, rest.rank()).copy_from(&rest.u);
    let lambda = std::iter::once(1.0).chain(rest.lambda).collect();
    Ok(PsdFactor {
        u,
        lambda,
        sketch_width: rest.sketch_width,
        nu_shift: rest.nu_shift,
    })
}

/// Outcome of [`compress_with`].
#[derive(Debug, Clone)]
pub struct Compression {
    pub coreset: Coreset,
    pub stats: EliminationStats,
    /// Threshold used in tolerance mode.
    pub tau: Option<f64>,
    /// `(support size, error)` per sweep step in tolerance mode.
    pub trace: Vec<(usize, f64)>,
}

/// Full pipeline: kernel selection followed by recombination or the
/// tolerance sweep.
pub fn compress(data: &DiscreteDistribution, config: &Co2Config) -> Result<Coreset> {
    let form = kernel_selection(data, config)?;
    Ok(compress_with(data, config, &form)?.coreset)
}

fn difference(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// The first run visits points in index order, later runs in seeded random
/// orders.
fn fixed_size(
    data: &DiscreteDistribution,
    form: &SinkhornQuadraticForm,
    m: usize,
    config: &Co2Config,
) -> Result<(Coreset, EliminationStats)> {
    if m >= data.support().len() {
        let cs = Coreset::from_dense(data.shared_cloud().clone(), data.weights(), "co2", m)?;
        return Ok((cs, EliminationStats::default()));
    }
    let u = form.moment_columns(m - 1);
    let k_diag = form.diagonal();
    let runs: Vec<(f64, Recombination)> = (0..config.restarts)
        .into_par_iter()
        .map(|run| {
            let mut order: Vec<usize> = (0..data.len()).collect();
            if run > 0 {
                order.shuffle(&mut rng_from_seed(derive_seed(
                    config.seed,
                    stream::ORDER,
                    run as u64,
                )));
            }
            let r = recombine_ordered(data, &u, &k_diag, &order)?;
            let err = form.eval(&difference(&r.coreset.dense_weights(), data.weights()));
            Ok((err, r))
        })
        .collect::<Result<_>>()?;
    let (_, best) = runs
        .into_iter()
        .fold(
            None,
            |best: Option<(f64, Recombination)>, cand| match best {
                Some(b) if b.0 <= cand.0 => Some(b),
                _ => Some(cand),
            },
        )
        .expect("at least one run");
    let method = best.coreset.method.replacen("recombination", "co2", 1);
    Ok((best.coreset.with_method(method), best.stats))
}

/// Compression against an already selected kernel.
pub fn compress_with(
    data: &DiscreteDistribution,
    config: &Co2Config,
    form: &SinkhornQuadraticForm,
) -> Result<Compression> {
    config.validate()?;
    if form.size() != data.len() {
        return Err(Error::DimensionMismatch {
            expected: data.len(),
            found: form.size(),
        });
    }
    let reference = data.weights();
    let (coreset, stats, tau, trace) = match config.size {
        SizeRule::Fixed { m } => {
            let (cs, stats) = fixed_size(data, form, m, config)?;
            (cs, stats, None, Vec::new())
        }
        SizeRule::Tolerance { tau, beta, m_max } => {
            let n = data.len();
            let tau = match tau {
                Some(t) => t,
                None => select_tau(
                    &form.kernel_eigenvalues(),
                    beta.unwrap_or_else(|| default_beta(n)),
                    n,
                    config.tau_draws,
                    derive_seed(config.seed, stream::TAU, 0),
                )?,
            };
            let m_max = m_max.min(n);
            let u = form.moment_columns(m_max - 1);
            let quad = |d: &[f64]| form.eval(d);
            let swept = sweep(data, &u, &quad, m_max, tau)?;
            if swept.threshold_hit {
                let method = swept
                    .coreset
                    .method
                    .replacen("recombination-sweep", "co2-sweep", 1);
                (
                    swept.coreset.with_method(method),
                    swept.stats,
                    Some(tau),
                    swept.trace,
                )
            } else {
                let (cs, stats) = fixed_size(data, form, m_max, config)?;
                (cs, stats, Some(tau), swept.trace)
            }
        }
    };
    let mut coreset = coreset.with_seed(config.seed);
    coreset.quad_error = Some(form.eval(&difference(&coreset.dense_weights(), reference)));
    Ok(Compression {
        coreset,
        stats,
        tau,
        trace,
    })
}

/// `|S(ℙₙ, P) - q(P - ℙₙ)| / S(ℙₙ, P)`, or [`DEGENERATE_RATIO`] when the
/// divergence is below [`DIVERGENCE_FLOOR`].
pub fn quad_approx_error(
    data: &DiscreteDistribution,
    coreset: &Coreset,
    form: &SinkhornQuadraticForm,
    solver: SolverOptions,
) -> Result<f64> {
    if coreset.parent().len() != data.len() {
        return Err(Error::CloudMismatch);
    }
    let s = DivergenceFrom::from_plan(data.clone(), form.plan(), solver)
        .to(&coreset.to_distribution()?)?;
    if s < DIVERGENCE_FLOOR {
        return Ok(DEGENERATE_RATIO);
    }
    let q = form.eval(&difference(&coreset.dense_weights(), data.weights()));
    Ok((s - q).abs() / s)
}

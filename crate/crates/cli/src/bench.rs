//! Desk-scale experiment runners. Every trial draws its own dataset from a
//! split seed, so trials run in parallel and still reproduce exactly.

use std::sync::Arc;
use std::time::Instant;

use anyhow::Result;
use clap::ValueEnum;
use co2_core::co2::{
    compress_with, form_from_plan, herding, random_subset, refine_weights, Co2Config, QuadMode,
    WeightObjective, DEFAULT_RESTARTS,
};
use co2_core::data::{DiscreteDistribution, PointCloud};
use co2_core::kernels::{gram, mmd_sq, GaussianKernel, GramMatrix};
use co2_core::recombination::Coreset;
use co2_core::rng::{derive_seed, stream};
use co2_core::sinkhorn::{self_plan, DivergenceFrom, SolverOptions};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::generators;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    /// Eight-component planar mixture compressed to 16 points.
    Mixture,
    /// Divergence of CO2 and random coresets on standard normal data.
    Recovery,
    /// Relative error of the quadratic form against the true divergence.
    Quadapprox,
    /// CO2, herding and random coresets on the unit cube.
    Baselines,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Co2,
    Random,
    Herding,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Co2 => "co2",
            Method::Random => "random",
            Method::Herding => "herding",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub experiment: Experiment,
    pub n: usize,
    pub d: usize,
    pub epsilon: f64,
    pub sizes: Vec<usize>,
    pub trials: usize,
    /// Random coresets drawn per trial and size.
    pub random_draws: usize,
    pub herding: bool,
    /// Optimize weights on the selected support for every method.
    pub refine: bool,
    /// Objective used by CO2 and by refinement.
    #[serde(default)]
    pub mode: QuadMode,
    /// Recombination runs per CO2 coreset.
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    pub theta: usize,
    pub seed: u64,
}

fn default_restarts() -> usize {
    DEFAULT_RESTARTS
}

impl BenchConfig {
    pub fn new(experiment: Experiment) -> Self {
        let base = Self {
            experiment,
            n: 2000,
            d: 2,
            epsilon: 4.0,
            sizes: vec![8, 16, 32, 64],
            trials: 20,
            random_draws: 1,
            herding: false,
            refine: true,
            mode: QuadMode::XiFast,
            restarts: DEFAULT_RESTARTS,
            theta: 3,
            seed: 0,
        };
        match experiment {
            Experiment::Mixture => Self {
                epsilon: 0.75,
                sizes: vec![16],
                trials: 8,
                random_draws: 20,
                ..base
            },
            Experiment::Recovery => base,
            Experiment::Quadapprox => Self {
                d: 10,
                epsilon: 20.0,
                sizes: vec![32, 64, 128],
                random_draws: 0,
                refine: false,
                ..base
            },
            Experiment::Baselines => Self {
                d: 10,
                epsilon: 20.0,
                sizes: vec![16, 32, 64],
                herding: true,
                ..base
            },
        }
    }

    /// Dimension change for the Gaussian experiments, keeping `ε = 2d`.
    pub fn with_dimension(mut self, d: usize) -> Self {
        self.d = d;
        if matches!(
            self.experiment,
            Experiment::Recovery | Experiment::Quadapprox
        ) {
            self.epsilon = 2.0 * d as f64;
        }
        self
    }

    fn dataset(&self, seed: u64) -> Arc<PointCloud> {
        match self.experiment {
            Experiment::Mixture => generators::gaussian_mixture(self.n, seed),
            Experiment::Recovery | Experiment::Quadapprox => {
                generators::standard_normal(self.n, self.d, seed)
            }
            Experiment::Baselines => generators::unit_cube(self.n, self.d, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub method: Method,
    pub m: usize,
    pub trial: usize,
    /// Index of the draw for randomized baselines.
    pub draw: usize,
    pub support: usize,
    pub divergence: f64,
    pub mmd_sq: f64,
    pub quad: f64,
    /// `|S - q| / S`, absent when the divergence vanishes.
    pub rel_error: Option<f64>,
    pub wall_ms: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: Method,
    pub m: usize,
    pub count: usize,
    pub divergence_q25: f64,
    pub divergence_median: f64,
    pub divergence_q75: f64,
    pub rel_error_median: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub config: BenchConfig,
    pub records: Vec<TrialRecord>,
    pub summary: Vec<Summary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub created: Option<u64>,
}

impl RunReport {
    pub fn select(&self, method: Method, m: usize) -> impl Iterator<Item = &TrialRecord> {
        self.records
            .iter()
            .filter(move |r| r.method == method && r.m == m)
    }

    pub fn summary_for(&self, method: Method, m: usize) -> Option<&Summary> {
        self.summary.iter().find(|s| s.method == method && s.m == m)
    }
}

/// Linear-interpolated quantile of unsorted data.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = p * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Per-trial state shared by all methods and sizes.
struct TrialContext {
    data: DiscreteDistribution,
    divergence: DivergenceFrom,
    gram: GramMatrix,
}

impl TrialContext {
    fn record<Q: WeightObjective + ?Sized>(
        &self,
        form: &Q,
        coreset: &Coreset,
        method: Method,
        m: usize,
        trial: usize,
        draw: usize,
        started: Instant,
    ) -> Result<TrialRecord> {
        let divergence = self.divergence.to(&coreset.to_distribution()?)?;
        let diff: Vec<f64> = coreset
            .dense_weights()
            .iter()
            .zip(self.data.weights())
            .map(|(a, b)| a - b)
            .collect();
        let quad = form.value(&diff);
        let rel_error = (divergence >= co2_core::co2::DIVERGENCE_FLOOR)
            .then(|| (divergence - quad).abs() / divergence);
        Ok(TrialRecord {
            method,
            m,
            trial,
            draw,
            support: coreset.len(),
            divergence,
            mmd_sq: mmd_sq(&self.gram, &coreset.to_distribution()?, &self.data)?,
            quad,
            rel_error,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            seed: coreset.seed,
        })
    }
}

fn run_trial(config: &BenchConfig, trial: usize) -> Result<Vec<TrialRecord>> {
    let trial_seed = derive_seed(config.seed, stream::DATA, trial as u64);
    let cloud = config.dataset(trial_seed);
    let data = DiscreteDistribution::uniform(cloud.clone());
    let solver = SolverOptions::default();
    let plan = self_plan(&data, config.epsilon, solver)?;
    let ctx = TrialContext {
        divergence: DivergenceFrom::from_plan(data.clone(), &plan, solver),
        gram: gram(&GaussianKernel::new(config.epsilon)?, &cloud),
        data,
    };
    let reference = ctx.data.weights();
    let finish = |cs: Coreset, form: &dyn WeightObjective| -> Result<Coreset> {
        Ok(if config.refine {
            refine_weights(&cs, form, reference)?.coreset
        } else {
            cs
        })
    };

    let mut records = Vec::new();
    for &m in &config.sizes {
        let co2_config = Co2Config::fixed(config.epsilon, m)
            .with_theta(config.theta)
            .with_mode(config.mode)
            .with_restarts(config.restarts)
            .with_seed(derive_seed(trial_seed, stream::SKETCH, m as u64));
        let started = Instant::now();
        let form = form_from_plan(plan.clone(), &co2_config)?;
        let cs = compress_with(&ctx.data, &co2_config, &form)?.coreset;
        let cs = finish(cs, &form)?;
        records.push(ctx.record(&form, &cs, Method::Co2, m, trial, 0, started)?);

        for draw in 0..config.random_draws {
            let started = Instant::now();
            let seed = derive_seed(trial_seed, stream::BASELINE, (m * 1_000_003 + draw) as u64);
            let cs = finish(random_subset(cloud.clone(), m, seed)?, &form)?;
            records.push(ctx.record(&form, &cs, Method::Random, m, trial, draw, started)?);
        }

        if config.herding {
            let started = Instant::now();
            let cs = finish(herding(cloud.clone(), &form, reference, m)?, &form)?;
            records.push(ctx.record(&form, &cs, Method::Herding, m, trial, 0, started)?);
        }
    }
    log::info!("trial {trial} done");
    Ok(records)
}

fn summarize(config: &BenchConfig, records: &[TrialRecord]) -> Vec<Summary> {
    let mut out = Vec::new();
    for method in [Method::Co2, Method::Random, Method::Herding] {
        for &m in &config.sizes {
            let rows: Vec<&TrialRecord> = records
                .iter()
                .filter(|r| r.method == method && r.m == m)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let div: Vec<f64> = rows.iter().map(|r| r.divergence).collect();
            let rel: Vec<f64> = rows.iter().filter_map(|r| r.rel_error).collect();
            out.push(Summary {
                method,
                m,
                count: rows.len(),
                divergence_q25: quantile(&div, 0.25),
                divergence_median: median(&div),
                divergence_q75: quantile(&div, 0.75),
                rel_error_median: (!rel.is_empty()).then(|| median(&rel)),
            });
        }
    }
    out
}

/// Runs all trials of an experiment.
pub fn run(config: &BenchConfig) -> Result<RunReport> {
    let invalid = |msg: String| Err(co2_core::Error::InvalidArgument(msg).into());
    if config.trials == 0 {
        return invalid("at least one trial is required".into());
    }
    if config.sizes.is_empty() {
        return invalid("at least one coreset size is required".into());
    }
    if let Some(&m) = config.sizes.iter().find(|&&m| m == 0 || m > config.n) {
        return invalid(format!("coreset size {m} is outside 1..={}", config.n));
    }
    let per_trial: Vec<Vec<TrialRecord>> = (0..config.trials)
        .into_par_iter()
        .map(|t| run_trial(config, t))
        .collect::<Result<_>>()?;
    let records: Vec<TrialRecord> = per_trial.into_iter().flatten().collect();
    Ok(RunReport {
        version: 1,
        config: config.clone(),
        summary: summarize(config, &records),
        records,
        created: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), 2.5);
        assert_eq!(quantile(&[0.0, 4.0], 0.25), 1.0);
    }

    #[test]
    fn tiny_run_has_expected_schema() {
        let config = BenchConfig {
            n: 60,
            sizes: vec![4, 8],
            trials: 2,
            random_draws: 2,
            herding: true,
            ..BenchConfig::new(Experiment::Recovery)
        };
        let report = run(&config).unwrap();
        assert_eq!(report.records.len(), 2 * 2 * (1 + 2 + 1));
        for r in &report.records {
            assert!(r.support <= r.m);
            assert!(r.divergence >= 0.0);
        }
        assert!(report.summary_for(Method::Herding, 8).is_some());
        let again = run(&config).unwrap();
        let strip = |r: &RunReport| {
            r.records
                .iter()
                .map(|x| (x.divergence, x.support))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&report), strip(&again));
    }

    #[test]
    fn defaults_follow_the_experiments() {
        let mix = BenchConfig::new(Experiment::Mixture);
        assert_eq!(
            (mix.epsilon, mix.sizes.clone(), mix.trials),
            (0.75, vec![16], 8)
        );
        assert_eq!(
            BenchConfig::new(Experiment::Recovery)
                .with_dimension(5)
                .epsilon,
            10.0
        );
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use co2_cli::bench::{self, BenchConfig, Experiment};
use co2_cli::output::{self, CoresetFile};
use co2_core::co2::{
    compress_with, kernel_selection, refine_weights, Co2Config, QuadMode, DEFAULT_RESTARTS,
};
use co2_core::data::{load_csv, standardize, DiscreteDistribution, PointCloud};
use co2_core::kernels::{gram, GaussianKernel};
use co2_core::lowrank::{spectrum, TailSum};
use co2_core::sinkhorn::{divergence, self_plan, SolverOptions, DEFAULT_MAX_ITER, DEFAULT_TOL};
use serde::Serialize;

/// Sinkhorn-divergence coresets.
#[derive(Debug, Parser)]
#[command(name = "co2", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compress a CSV point cloud to a weighted coreset.
    Compress(CompressArgs),
    /// Run a desk-scale benchmark.
    Bench(BenchArgs),
    /// Spectra and tail sums of the self-plan and Gram matrix.
    Diag(DiagArgs),
    /// Sinkhorn divergence between two uniformly weighted CSV clouds.
    Sinkhorn(SinkhornArgs),
}

#[derive(Debug, Args)]
struct InputArgs {
    /// CSV file, one point per row.
    input: PathBuf,
    /// Skip the first row.
    #[arg(long)]
    header: bool,
    /// Rescale each column to zero mean and unit variance first.
    #[arg(long)]
    standardize: bool,
}

impl InputArgs {
    fn load(&self) -> Result<Arc<PointCloud>> {
        let cloud = load_csv(&self.input, self.header)?;
        Ok(Arc::new(if self.standardize {
            standardize(&cloud)?.0
        } else {
            cloud
        }))
    }
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("size").required(true).args(["m", "tau", "beta"]))]
struct CompressArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    epsilon: f64,
    /// Target coreset size.
    #[arg(long, conflicts_with_all = ["tau", "beta", "m_max"])]
    m: Option<usize>,
    /// Sweep threshold on the quadratic error.
    #[arg(long, conflicts_with = "beta")]
    tau: Option<f64>,
    /// Quantile level for the automatic threshold.
    #[arg(long)]
    beta: Option<f64>,
    /// Largest size considered by the sweep.
    #[arg(long, default_value_t = 64)]
    m_max: usize,
    #[arg(long, default_value_t = 3)]
    theta: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use the spectral inverse form instead of the plan itself.
    #[arg(long)]
    exact_g: bool,
    /// Optimize the weights on the selected support.
    #[arg(long)]
    refine: bool,
    /// Recombination runs; the best by quadratic error is kept.
    #[arg(long, default_value_t = DEFAULT_RESTARTS)]
    restarts: usize,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    max_iter: usize,
    /// Output JSON; the weights CSV is written beside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_timestamp: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(value_enum)]
    experiment: Experiment,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Comma-separated coreset sizes.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    trials: Option<usize>,
    /// Random coresets per trial and size.
    #[arg(long)]
    random_draws: Option<usize>,
    #[arg(long)]
    no_refine: bool,
    /// Use the exact second-order operator for CO2 and refinement.
    #[arg(long)]
    exact_g: bool,
    /// Recombination runs per CO2 coreset; the best by quadratic error is kept.
    #[arg(long, default_value_t = DEFAULT_RESTARTS)]
    restarts: usize,
    #[arg(long, default_value_t = 3)]
    theta: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report JSON; the trial CSV is written beside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_timestamp: bool,
}

#[derive(Debug, Args)]
struct DiagArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    epsilon: f64,
    /// Report JSON; the per-index CSV is written beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SinkhornArgs {
    first: PathBuf,
    second: PathBuf,
    #[arg(long)]
    epsilon: f64,
    #[arg(long)]
    header: bool,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    max_iter: usize,
}

#[derive(Debug, Serialize)]
struct CompressEcho {
    #[serde(flatten)]
    co2: Co2Config,
    standardize: bool,
    refine: bool,
}

fn compress(args: &CompressArgs) -> Result<()> {
    let cloud = args.input.load()?;
    let data = DiscreteDistribution::uniform(cloud.clone());
    let mut config = match args.m {
        Some(m) => Co2Config::fixed(args.epsilon, m),
        None => Co2Config::tolerance(args.epsilon, args.tau, args.beta, args.m_max),
    }
    .with_theta(args.theta)
    .with_seed(args.seed)
    .with_restarts(args.restarts)
    .with_mode(if args.exact_g {
        QuadMode::GExact
    } else {
        QuadMode::XiFast
    });
    config.tol = args.tol;
    config.max_iter = args.max_iter;

    let form = kernel_selection(&data, &config)?;
    let out = compress_with(&data, &config, &form)?;
    if let Some(tau) = out.tau {
        log::info!("threshold {tau:e}, coreset size {}", out.coreset.len());
    }
    let coreset = if args.refine {
        refine_weights(&out.coreset, &form, data.weights())?.coreset
    } else {
        out.coreset
    };
    let echo = CompressEcho {
        co2: config,
        standardize: args.input.standardize,
        refine: args.refine,
    };
    output::write_coreset(
        &args.out,
        &CoresetFile::new(&coreset, echo, !args.no_timestamp),
    )?;
    output::read_coreset(&args.out, cloud).context("re-validating the written coreset")?;
    Ok(())
}

fn run_bench(args: &BenchArgs) -> Result<()> {
    let mut config = BenchConfig::new(args.experiment);
    if let Some(d) = args.d {
        config = config.with_dimension(d);
    }
    config.n = args.n.unwrap_or(config.n);
    config.epsilon = args.epsilon.unwrap_or(config.epsilon);
    config.sizes = args.sizes.clone().unwrap_or(config.sizes);
    config.trials = args.trials.unwrap_or(config.trials);
    config.random_draws = args.random_draws.unwrap_or(config.random_draws);
    config.refine &= !args.no_refine;
    if args.exact_g {
        config.mode = QuadMode::GExact;
    }
    config.restarts = args.restarts;
    config.theta = args.theta;
    config.seed = args.seed;
    let mut report = bench::run(&config)?;
    report.created = (!args.no_timestamp).then(output::unix_now);
    output::write_report(&args.out, &report)?;
    for s in &report.summary {
        println!(
            "{:<8} m={:<4} median divergence {:.4e} [{:.4e}, {:.4e}]{}",
            s.method.name(),
            s.m,
            s.divergence_median,
            s.divergence_q25,
            s.divergence_q75,
            s.rel_error_median
                .map(|r| format!("  median rel. error {r:.4}"))
                .unwrap_or_default()
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct DiagReport {
    n: usize,
    epsilon: f64,
    plan_spectrum: Vec<f64>,
    gram_spectrum: Vec<f64>,
    plan_tail: Vec<f64>,
    gram_tail: Vec<f64>,
    suggested_m: usize,
}

fn diag(args: &DiagArgs) -> Result<()> {
    let cloud = args.input.load()?;
    let n = cloud.len();
    let data = DiscreteDistribution::uniform(cloud.clone());
    let plan = self_plan(&data, args.epsilon, SolverOptions::default())?;
    let plan_tail = TailSum::from_spectrum(spectrum(&plan.normalized()));
    let k = gram(&GaussianKernel::new(args.epsilon)?, &cloud);
    let gram_tail = TailSum::from_spectrum(spectrum(&(k.entries() / n as f64)));
    let suggested_m = gram_tail.first_below(1.0 / (n as f64).powi(2)).max(1);
    let report = DiagReport {
        n,
        epsilon: args.epsilon,
        plan_spectrum: plan_tail.eigenvalues.clone(),
        gram_spectrum: gram_tail.eigenvalues.clone(),
        plan_tail: plan_tail.values.clone(),
        gram_tail: gram_tail.values.clone(),
        suggested_m,
    };
    output::write_json(&args.out, &report)?;
    let mut w = csv::Writer::from_path(output::csv_sibling(&args.out))?;
    w.write_record([
        "i",
        "plan_eigenvalue",
        "gram_eigenvalue",
        "plan_tail",
        "gram_tail",
    ])?;
    for i in 0..n {
        w.serialize((
            i,
            report.plan_spectrum[i],
            report.gram_spectrum[i],
            report.plan_tail[i],
            report.gram_tail[i],
        ))?;
    }
    w.flush()?;
    println!("suggested m = {suggested_m}");
    Ok(())
}

fn sinkhorn(args: &SinkhornArgs) -> Result<()> {
    let load = |p: &Path| -> Result<DiscreteDistribution> {
        Ok(DiscreteDistribution::uniform(Arc::new(load_csv(
            p,
            args.header,
        )?)))
    };
    let opts = SolverOptions::new(args.tol, args.max_iter)?;
    let s = divergence(
        &load(&args.first)?,
        &load(&args.second)?,
        args.epsilon,
        opts,
    )?;
    println!("{s}");
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(raw) = std::env::var("CO2_THREADS") {
        let threads: usize = raw.parse().map_err(|_| {
            co2_core::Error::InvalidArgument(format!(
                "CO2_THREADS must be a positive integer, got {raw:?}"
            ))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()?;
    }
    Ok(())
}

/// 2 for invalid arguments, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<co2_core::Error>(),
            Some(co2_core::Error::InvalidArgument(_))
        )
    });
    if usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Compress(args) => compress(args),
        Command::Bench(args) => run_bench(args),
        Command::Diag(args) => diag(args),
        Command::Sinkhorn(args) => sinkhorn(args),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

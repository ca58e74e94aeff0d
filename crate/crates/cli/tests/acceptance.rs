//! End-to-end acceptance checks. Runs every check in order, prints one
//! PASS/FAIL line each, and exits nonzero if any failed.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use co2_cli::bench::{self, BenchConfig, Experiment, Method, RunReport};
use co2_core::co2::select_tau;
use co2_core::data::{DiscreteDistribution, PointCloud};
use co2_core::lowrank::{nystrom, trace_norm};
use co2_core::recombination::{recombine, MomentSystem};
use co2_core::sinkhorn::{
    divergence, marginal_residual, ot_value, self_plan, solve, SinkhornProblem, SolverOptions,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, started: Instant) -> Result<(), String> {
    let took = started.elapsed();
    ensure(took < limit, || format!("took {took:.1?}, limit {limit:?}"))
}

fn normal_cloud(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Arc<PointCloud> {
    let coords = (0..n * d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>();
    Arc::new(PointCloud::new(coords, n, d).unwrap())
}

fn random_distribution(
    rng: &mut ChaCha8Rng,
    n: usize,
    d: usize,
    scale: f64,
) -> DiscreteDistribution {
    let cloud = normal_cloud(rng, n, d, scale);
    let w = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    DiscreteDistribution::normalized(cloud, w).unwrap()
}

fn sinkhorn_correctness() -> Outcome {
    let started = Instant::now();
    let opts = SolverOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_marg, mut worst_self, mut worst_neg, mut worst_asym) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for case in 0..200 {
        let d = rng.random_range(1..=5);
        let (n1, n2) = (rng.random_range(1..=50), rng.random_range(1..=50));
        let eps = 10f64.powf(rng.random_range(-1.0..2.0));
        let mu = random_distribution(&mut rng, n1, d, 1.0);
        let nu = random_distribution(&mut rng, n2, d, 1.0);
        let fail =
            |e: co2_core::Error| format!("case {case} (n={n1}/{n2}, d={d}, eps={eps:.3}): {e}");
        for p in [
            SinkhornProblem::new(mu.clone(), nu.clone(), eps).unwrap(),
            SinkhornProblem::new(mu.clone(), mu.clone(), eps).unwrap(),
        ] {
            let sol = solve(&p, opts).map_err(fail)?;
            worst_marg = worst_marg.max(marginal_residual(&p, &sol));
        }
        let cross = ot_value(&mu, &nu, eps, opts).map_err(fail)?;
        let own = (
            ot_value(&mu, &mu, eps, opts).map_err(fail)?,
            ot_value(&nu, &nu, eps, opts).map_err(fail)?,
        );
        let raw = cross - 0.5 * (own.0 + own.1);
        worst_neg = worst_neg.min(raw);
        let ab = divergence(&mu, &nu, eps, opts).map_err(fail)?;
        let ba = divergence(&nu, &mu, eps, opts).map_err(fail)?;
        worst_asym = worst_asym.max((ab - ba).abs());
        worst_self = worst_self.max(divergence(&mu, &mu, eps, opts).map_err(fail)?.abs());
    }
    ensure(worst_marg <= 1e-6, || {
        format!("marginal residual {worst_marg:e}")
    })?;
    ensure(worst_self <= 1e-8, || {
        format!("|S(mu,mu)| = {worst_self:e}")
    })?;
    ensure(worst_neg >= -1e-7, || {
        format!("S(mu,nu) = {worst_neg:e} before clamping")
    })?;
    ensure(worst_asym <= 1e-7, || format!("asymmetry {worst_asym:e}"))?;

    let mut worst_dirac = 0.0f64;
    for _ in 0..20 {
        let d = rng.random_range(1..=5);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let eps = 10f64.powf(rng.random_range(-1.0..2.0));
        let s = divergence(
            &DiscreteDistribution::dirac(&x).unwrap(),
            &DiscreteDistribution::dirac(&y).unwrap(),
            eps,
            opts,
        )
        .map_err(|e| e.to_string())?;
        let dist2: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum();
        worst_dirac = worst_dirac.max((s - dist2).abs());
    }
    ensure(worst_dirac <= 1e-8, || {
        format!("Dirac error {worst_dirac:e}")
    })?;
    within(Duration::from_secs(60), started)?;
    Ok(format!(
        "200 problems: marginals {worst_marg:.1e}, self {worst_self:.1e}, min S {worst_neg:.1e}, asym {worst_asym:.1e}; Dirac {worst_dirac:.1e}; {:.1?}",
        started.elapsed()
    ))
}

/// Scaling iteration `α ← 1/(K(b∘β))`, `β ← 1/(Kᵀ(a∘α))` in the ordinary
/// domain until the scalings stop moving; returns `(f, g)` with
/// `f = ε log α`, `g = ε log β`, shifted so that `f₀ = g₀`.
fn dense_potentials(
    x: &PointCloud,
    a: &[f64],
    y: &PointCloud,
    b: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let k = DMatrix::from_fn(x.len(), y.len(), |i, j| {
        let c: f64 = x
            .point(i)
            .iter()
            .zip(y.point(j))
            .map(|(p, q)| (p - q).powi(2))
            .sum();
        (-c / eps).exp()
    });
    let (mut alpha, mut beta) = (
        DVector::from_element(x.len(), 1.0),
        DVector::from_element(y.len(), 1.0),
    );
    for _ in 0..1_000_000 {
        let kb = &k * beta.component_mul(&DVector::from_column_slice(b));
        let next_alpha = kb.map(|v| 1.0 / v);
        let ka = k.transpose() * next_alpha.component_mul(&DVector::from_column_slice(a));
        let next_beta = ka.map(|v| 1.0 / v);
        let change = (&next_alpha - &alpha).amax() / next_alpha.amax()
            + (&next_beta - &beta).amax() / next_beta.amax();
        alpha = next_alpha;
        beta = next_beta;
        if change < 1e-15 {
            break;
        }
    }
    let mut f: Vec<f64> = alpha.iter().map(|v| eps * v.ln()).collect();
    let mut g: Vec<f64> = beta.iter().map(|v| eps * v.ln()).collect();
    let shift = 0.5 * (g[0] - f[0]);
    f.iter_mut().for_each(|v| *v += shift);
    g.iter_mut().for_each(|v| *v -= shift);
    (f, g)
}

fn dense_ot(mu: &DiscreteDistribution, nu: &DiscreteDistribution, eps: f64) -> f64 {
    let (f, g) = dense_potentials(mu.cloud(), mu.weights(), nu.cloud(), nu.weights(), eps);
    f.iter().zip(mu.weights()).map(|(f, a)| f * a).sum::<f64>()
        + g.iter().zip(nu.weights()).map(|(g, b)| g * b).sum::<f64>()
}

fn small_oracles() -> Outcome {
    let started = Instant::now();
    let opts = SolverOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_div, mut worst_plan) = (0.0f64, 0.0f64);
    let mut cases = 0;
    for n1 in 1..=5 {
        for n2 in 1..=5 {
            for _ in 0..4 {
                let d = rng.random_range(1..=3);
                let eps = rng.random_range(0.5..5.0);
                let mu = random_distribution(&mut rng, n1, d, 0.7);
                let nu = random_distribution(&mut rng, n2, d, 0.7);
                let oracle = dense_ot(&mu, &nu, eps)
                    - 0.5 * (dense_ot(&mu, &mu, eps) + dense_ot(&nu, &nu, eps));
                let got = divergence(&mu, &nu, eps, opts).map_err(|e| e.to_string())?;
                worst_div = worst_div.max((got - oracle.max(0.0)).abs());

                let plan = self_plan(&mu, eps, opts).map_err(|e| e.to_string())?;
                let (f, _) =
                    dense_potentials(mu.cloud(), mu.weights(), mu.cloud(), mu.weights(), eps);
                let a = mu.weights();
                for i in 0..n1 {
                    for j in 0..n1 {
                        let c: f64 = mu
                            .cloud()
                            .point(i)
                            .iter()
                            .zip(mu.cloud().point(j))
                            .map(|(p, q)| (p - q).powi(2))
                            .sum();
                        let expected = a[i] * a[j] * ((f[i] + f[j] - c) / eps).exp();
                        worst_plan = worst_plan.max((plan.plan()[(i, j)] - expected).abs());
                    }
                }
                cases += 1;
            }
        }
    }
    ensure(worst_div <= 1e-7, || {
        format!("divergence off by {worst_div:e}")
    })?;
    ensure(worst_plan <= 1e-7, || {
        format!("self-plan off by {worst_plan:e}")
    })?;
    within(Duration::from_secs(10), started)?;
    Ok(format!(
        "{cases} problems: divergence {worst_div:.1e}, self-plan {worst_plan:.1e}; {:.1?}",
        started.elapsed()
    ))
}

/// Every support of size at most two on three points that matches mass and
/// the single moment with nonnegative weights, and does not raise the
/// diagonal moment.
fn feasible_supports(u: &[f64; 3], w: &[f64; 3], k_diag: &[f64; 3]) -> Vec<[f64; 3]> {
    let target_u: f64 = (0..3).map(|i| u[i] * w[i]).sum();
    let target_k: f64 = (0..3).map(|i| k_diag[i] * w[i]).sum();
    let mut out = Vec::new();
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let det = u[j] - u[i];
        if det.abs() < 1e-12 {
            continue;
        }
        let wj = (target_u - u[i]) / det;
        let wi = 1.0 - wj;
        if wi < -1e-12 || wj < -1e-12 {
            continue;
        }
        if k_diag[i] * wi + k_diag[j] * wj > target_k + 1e-10 {
            continue;
        }
        let mut dense = [0.0; 3];
        dense[i] = wi.max(0.0);
        dense[j] = wj.max(0.0);
        out.push(dense);
    }
    out
}

fn recombination_exactness() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_res, mut worst_sum, mut worst_gap, mut worst_excess) =
        (0.0f64, 0.0f64, 0.0f64, 0usize);
    for case in 0..100 {
        let n = rng.random_range(3..=200);
        let m = rng.random_range(2..=20.min(n));
        let d = rng.random_range(1..=4);
        let input = random_distribution(&mut rng, n, d, 1.0);
        let u = DMatrix::<f64>::from_fn(n, m - 1, |_, _| StandardNormal.sample(&mut rng));
        let k_diag: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let r = recombine(&input, &u, &k_diag).map_err(|e| format!("case {case}: {e}"))?;
        let sys = MomentSystem::with_mass(&u, None).unwrap();
        worst_res = worst_res.max(sys.residual(&r.coreset.dense_weights(), input.weights()));
        worst_sum = worst_sum.max((r.coreset.weights.iter().sum::<f64>() - 1.0).abs());
        ensure(r.coreset.weights.iter().all(|&w| w > 0.0), || {
            format!("case {case}: nonpositive weight")
        })?;
        worst_excess = worst_excess.max(r.coreset.len().saturating_sub(m));
        worst_gap = worst_gap.min(r.diagonal_gap);
    }
    ensure(worst_res <= 1e-8, || {
        format!("moment residual {worst_res:e}")
    })?;
    ensure(worst_sum <= 1e-10, || {
        format!("weight sum off by {worst_sum:e}")
    })?;
    ensure(worst_excess == 0, || {
        format!("support exceeds m by {worst_excess}")
    })?;
    ensure(worst_gap >= -1e-8, || format!("diagonal gap {worst_gap:e}"))?;

    // three points, one moment: every instance of a grid over the moment
    // values, weights and diagonal
    let grid = [-1.0, -0.3, 0.4, 1.2];
    let weights = [[1.0 / 3.0; 3], [0.5, 0.3, 0.2], [0.1, 0.6, 0.3]];
    let diags = [[1.0, 2.0, 1.0], [1.0, 1.0, 3.0], [2.0, 0.5, 1.0]];
    let mut checked = 0;
    let cloud = Arc::new(PointCloud::new(vec![0.0, 1.0, 2.0], 3, 1).unwrap());
    for &u0 in &grid {
        for &u1 in &grid {
            for &u2 in &grid {
                let u = [u0, u1, u2];
                if u0 == u1 || u1 == u2 || u0 == u2 {
                    continue;
                }
                for w in &weights {
                    for k in &diags {
                        let input = DiscreteDistribution::new(cloud.clone(), w.to_vec()).unwrap();
                        let r = recombine(&input, &DMatrix::from_column_slice(3, 1, &u), k)
                            .map_err(|e| format!("u={u:?} w={w:?} k={k:?}: {e}"))?;
                        let got = r.coreset.dense_weights();
                        let options = feasible_supports(&u, w, k);
                        let hit = options
                            .iter()
                            .any(|o| o.iter().zip(&got).all(|(a, b)| (a - b).abs() <= 1e-10));
                        ensure(hit, || {
                            format!("u={u:?} w={w:?} k={k:?}: {got:?} not among {options:?}")
                        })?;
                        checked += 1;
                    }
                }
            }
        }
    }
    within(Duration::from_secs(60), started)?;
    Ok(format!(
        "100 instances: residual {worst_res:.1e}, sum {worst_sum:.1e}, min gap {worst_gap:.1e}; {checked} three-point instances match enumeration; {:.1?}",
        started.elapsed()
    ))
}

/// `Q diag(σ) Qᵀ` with a random orthogonal `Q`.
fn with_spectrum(sigma: &[f64], seed: u64) -> DMatrix<f64> {
    let n = sigma.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
    let q = g.qr().q();
    &q * DMatrix::from_diagonal(&DVector::from_column_slice(sigma)) * q.transpose()
}

fn nystrom_bound() -> Outcome {
    let started = Instant::now();
    let mut report = Vec::new();
    for ratio in [0.5f64, 0.7, 0.85] {
        let sigma: Vec<f64> = (0..20).map(|j| ratio.powi(j)).collect();
        let a = with_spectrum(&sigma, (ratio * 100.0) as u64);
        for (m, theta) in [(5usize, 2usize), (5, 3), (10, 3)] {
            let tail: f64 = sigma[m..].iter().sum();
            let err = (0..50u64)
                .map(|s| {
                    let f = nystrom(&a, m, theta * m, s).unwrap();
                    trace_norm(&(&a - f.reconstruct()))
                })
                .sum::<f64>()
                / 50.0;
            let bound = 1.5 * (1.0 + m as f64 / ((m * (theta - 1)) as f64 - 1.0)) * tail;
            ensure(err <= bound, || {
                format!("ratio {ratio}, (m, theta) = ({m}, {theta}): {err:.3e} > {bound:.3e}")
            })?;
            report.push(err / bound);
        }
    }
    within(Duration::from_secs(30), started)?;
    let worst = report.iter().cloned().fold(0.0, f64::max);
    Ok(format!(
        "9 settings, worst error/bound {worst:.3}; {:.1?}",
        started.elapsed()
    ))
}

fn medians(report: &RunReport, method: Method, sizes: &[usize]) -> Vec<f64> {
    sizes
        .iter()
        .map(|&m| {
            report
                .summary_for(method, m)
                .expect("summary row")
                .divergence_median
        })
        .collect()
}

fn beats_random() -> Outcome {
    let started = Instant::now();
    let mixture = BenchConfig {
        trials: 20,
        random_draws: 20,
        ..BenchConfig::new(Experiment::Mixture)
    };
    let report = bench::run(&mixture).map_err(|e| e.to_string())?;
    let mut wins = 0;
    for t in 0..mixture.trials {
        let co2 = report
            .records
            .iter()
            .find(|r| r.trial == t && r.method == Method::Co2)
            .expect("co2 record")
            .divergence;
        let mut random: Vec<f64> = report
            .records
            .iter()
            .filter(|r| r.trial == t && r.method == Method::Random)
            .map(|r| r.divergence)
            .collect();
        random.sort_by(f64::total_cmp);
        if co2 < bench::median(&random) {
            wins += 1;
        }
    }

    let recovery = BenchConfig {
        sizes: vec![32, 64, 128],
        trials: 20,
        ..BenchConfig::new(Experiment::Recovery).with_dimension(10)
    };
    let rec = bench::run(&recovery).map_err(|e| e.to_string())?;
    let co2 = medians(&rec, Method::Co2, &recovery.sizes);
    let random = medians(&rec, Method::Random, &recovery.sizes);
    let line = format!(
        "mixture {wins}/20 trials below the random median; recovery medians co2 {} vs random {}; {:.1?}",
        sci(&co2),
        sci(&random),
        started.elapsed()
    );
    ensure(wins >= 18, || line.clone())?;
    ensure(co2.iter().zip(&random).all(|(c, r)| c < r), || line.clone())?;
    within(Duration::from_secs(15 * 60), started).map_err(|e| format!("{line}; {e}"))?;
    Ok(line)
}

fn quadratic_approximation() -> Outcome {
    let started = Instant::now();
    let config = BenchConfig {
        trials: 20,
        ..BenchConfig::new(Experiment::Quadapprox)
    };
    let report = bench::run(&config).map_err(|e| e.to_string())?;
    let errs: Vec<f64> = config
        .sizes
        .iter()
        .map(|&m| {
            report
                .summary_for(Method::Co2, m)
                .and_then(|s| s.rel_error_median)
                .expect("relative error")
        })
        .collect();
    let line = format!(
        "median relative error {errs:.4?} at m = {:?}; {:.1?}",
        config.sizes,
        started.elapsed()
    );
    let inversions: Vec<(f64, f64)> = errs
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| (w[0], w[1]))
        .collect();
    ensure(
        inversions.len() <= 1 && inversions.iter().all(|(a, b)| *b <= 1.1 * a),
        || format!("not decreasing: {line}"),
    )?;
    ensure(*errs.last().unwrap() <= 0.15, || {
        format!("too large at the largest size: {line}")
    })?;
    within(Duration::from_secs(15 * 60), started).map_err(|e| format!("{line}; {e}"))?;
    Ok(line)
}

fn tau_selection() -> Outcome {
    let started = Instant::now();
    let chi1 = select_tau(&[1.0], 0.05, 100, 100_000, 7).map_err(|e| e.to_string())? * 100.0;
    let exact1 = 0.003_932_14;
    ensure((chi1 - exact1).abs() <= 0.1 * exact1, || {
        format!("chi2(1) 5% quantile {chi1:e} vs {exact1:e}")
    })?;
    let chi2 = select_tau(&[1.0, 1.0], 0.5, 1, 100_000, 8).map_err(|e| e.to_string())?;
    let exact2 = 2.0 * std::f64::consts::LN_2;
    ensure((chi2 - exact2).abs() <= 0.05 * exact2, || {
        format!("chi2(2) median {chi2} vs {exact2}")
    })?;
    let eig = [0.8, 0.3, 0.1, 0.02];
    let scaled: Vec<f64> = [10usize, 100, 1000, 12345]
        .iter()
        .map(|&n| select_tau(&eig, 0.2, n, 10_000, 9).unwrap() * n as f64)
        .collect();
    let spread = scaled
        .iter()
        .map(|v| (v - scaled[0]).abs())
        .fold(0.0, f64::max)
        / scaled[0];
    ensure(spread <= 1e-12, || {
        format!("tau * n varies by {spread:e}: {scaled:?}")
    })?;
    within(Duration::from_secs(10), started)?;
    Ok(format!("chi2(1) {chi1:.5e} (exact {exact1:.5e}), chi2(2) {chi2:.4} (exact {exact2:.4}), tau*n spread {spread:.0e}; {:.1?}", started.elapsed()))
}

fn run_compress(input: &Path, out: &Path, threads: usize) -> Result<(Vec<u8>, Vec<u8>), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_co2"))
        .env("CO2_THREADS", threads.to_string())
        .args([
            "compress",
            input.to_str().unwrap(),
            "--epsilon",
            "2",
            "--m",
            "12",
            "--seed",
            "5",
            "--refine",
            "--no-timestamp",
            "--out",
        ])
        .arg(out)
        .status()
        .map_err(|e| e.to_string())?;
    ensure(status.success(), || {
        format!("compress exited with {status}")
    })?;
    let json = std::fs::read(out).map_err(|e| e.to_string())?;
    let csv = std::fs::read(out.with_extension("csv")).map_err(|e| e.to_string())?;
    Ok((json, csv))
}

fn determinism() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let input = dir.path().join("points.csv");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cloud = normal_cloud(&mut rng, 300, 3, 1.0);
    let rows: String = cloud
        .points()
        .map(|p| {
            p.iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(",")
                + "\n"
        })
        .collect();
    std::fs::write(&input, rows).map_err(|e| e.to_string())?;
    let first = run_compress(&input, &dir.path().join("a.json"), 1)?;
    let again = run_compress(&input, &dir.path().join("b.json"), 1)?;
    let wide = run_compress(&input, &dir.path().join("c.json"), 4)?;
    ensure(first == again, || "two runs with one thread differ".into())?;
    ensure(first == wide, || "one and four threads differ".into())?;
    within(Duration::from_secs(30), started)?;
    Ok(format!(
        "3 runs byte-identical ({} bytes JSON); {:.1?}",
        first.0.len(),
        started.elapsed()
    ))
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 8] = [
        ("sinkhorn correctness", sinkhorn_correctness),
        ("small-instance oracles", small_oracles),
        ("recombination exactness", recombination_exactness),
        ("nystrom bound", nystrom_bound),
        ("beats random", beats_random),
        ("quadratic approximation", quadratic_approximation),
        ("tau selection", tau_selection),
        ("determinism", determinism),
    ];
    // optional positional filter: numbers of the checks to run
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("acceptance {} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("acceptance {} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}

fn sci(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

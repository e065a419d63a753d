//! Monte Carlo studies: band coverage, convergence rates and the size of the
//! Bahadur remainder.

use std::time::Instant;

use pmest::banded::BandedMatrix;
use pmest::inference::{
    default_method, level_band, marginal_effect_band, order_statistic, simulate_band,
    simulate_band_brownian_bridge, EvalGrid, SimMethod, SimOptions,
};
use pmest::rng::{derive_seed, substream, tags};
use pmest::sandwich::{linear_term, SandwichSet};
use pmest::{fit, Dataset, Error, FitResult, Result};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Transform};
use crate::dgp::DgpSpec;

pub const SCHEMA_VERSION: u32 = 1;

/// Largest tolerated fraction of failed replications.
pub const MAX_FAILURE_RATE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    Coverage,
    Rates,
    Bahadur,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepSummary {
    pub n: usize,
    pub rep: usize,
    pub seed: u64,
    pub cells: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covered: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crit: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sup_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l2_error: Option<f64>,
    /// `sup |mu_hat - p' beta_* - L|` with `beta_*` the weighted projection of the truth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub remainder: Option<f64>,
    /// `sup |mu_hat - mu_0 - L|`, which includes the approximation bias.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub remainder_vs_truth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub linear: Option<f64>,
}

impl RepSummary {
    fn new(n: usize, rep: usize, seed: u64, cells: usize) -> Self {
        Self {
            n,
            rep,
            seed,
            cells,
            error: None,
            covered: None,
            crit: None,
            sup_error: None,
            l2_error: None,
            remainder: None,
            remainder_vs_truth: None,
            linear: None,
        }
    }

    pub fn ratio(&self) -> Option<f64> {
        Some(self.remainder? / self.linear?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub coverage: f64,
    /// Binomial standard error of `coverage`.
    pub se: f64,
    pub completed: usize,
    pub failed: usize,
    pub mean_crit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub n: usize,
    pub cells: usize,
    pub median_sup_error: f64,
    pub median_l2_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slope {
    pub estimate: f64,
    /// Percentile bootstrap interval (2.5%, 97.5%) over replications.
    pub ci: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatesSummary {
    pub points: Vec<RatePoint>,
    pub sup_slope: Slope,
    pub l2_slope: Slope,
    /// The theoretical slope `-m / (2m + d)`.
    pub target_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BahadurPoint {
    pub n: usize,
    pub cells: usize,
    pub median_remainder: f64,
    pub median_remainder_vs_truth: f64,
    pub median_linear: f64,
    /// Median over replications of `remainder / linear`.
    pub median_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BahadurSummary {
    pub points: Vec<BahadurPoint>,
    /// First-to-last ratio of `median_ratio` along the ladder.
    pub decay_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub study: Study,
    pub config: ExperimentConfig,
    pub wall_clock_secs: f64,
    pub threads: usize,
    pub reps: Vec<RepSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<CoverageSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rates: Option<RatesSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bahadur: Option<BahadurSummary>,
}

/// Worker count: the config, then `PMEST_THREADS`, then rayon's default.
pub fn thread_count(cfg: &ExperimentConfig) -> usize {
    cfg.threads
        .or_else(|| {
            std::env::var("PMEST_THREADS")
                .ok()
                .and_then(|s| s.parse().ok())
                .filter(|&t| t > 0)
        })
        .unwrap_or_else(rayon::current_num_threads)
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn run(study: Study, cfg: ExperimentConfig) -> Result<RunReport> {
    match study {
        Study::Coverage => run_coverage(cfg),
        Study::Rates => run_rates(cfg),
        Study::Bahadur => run_bahadur(cfg),
    }
}

fn dgp_at(cfg: &ExperimentConfig, n: usize) -> DgpSpec {
    DgpSpec {
        n,
        seed: derive_seed(cfg.dgp.seed, n as u64),
        ..cfg.dgp.clone()
    }
}

/// Runs `body` for every `(n, rep)` pair in parallel and collects summaries in order.
fn replicate(
    cfg: &ExperimentConfig,
    ns: &[usize],
    body: impl Fn(&DgpSpec, &Dataset, &mut RepSummary) -> Result<()> + Sync,
) -> Result<(Vec<RepSummary>, usize)> {
    let threads = thread_count(cfg);
    let jobs: Vec<(usize, usize)> = ns
        .iter()
        .flat_map(|&n| (0..cfg.reps).map(move |r| (n, r)))
        .collect();
    let reps = with_pool(threads, || {
        jobs.par_iter()
            .map(|&(n, rep)| {
                let spec = dgp_at(cfg, n);
                let mut s = RepSummary::new(n, rep, spec.seed, cfg.cells_for(n));
                let outcome = spec
                    .generate(rep as u64)
                    .and_then(|data| body(&spec, &data, &mut s));
                if let Err(e) = outcome {
                    s.error = Some(e.to_string());
                }
                s
            })
            .collect::<Vec<_>>()
    })?;
    let failed = reps.iter().filter(|r| r.error.is_some()).count();
    if failed as f64 > MAX_FAILURE_RATE * reps.len() as f64 {
        let first = reps
            .iter()
            .find_map(|r| r.error.clone())
            .unwrap_or_default();
        return Err(Error::InvalidInput(format!(
            "{failed} of {} replications failed (first error: {first})",
            reps.len()
        )));
    }
    Ok((reps, threads))
}

fn fit_rep(cfg: &ExperimentConfig, spec: &DgpSpec, data: &Dataset) -> Result<FitResult> {
    let basis = cfg.basis_for(data.n())?;
    fit(data, &basis, &spec.loss()?, cfg.q_grid(), &cfg.solver)
}

/// Truth on the grid, on the scale of the band.
fn band_truth(cfg: &ExperimentConfig, spec: &DgpSpec, grid: &EvalGrid) -> Result<Vec<f64>> {
    let link = spec.loss()?.link;
    let zero = vec![0; grid.v.len()];
    let mut out = Vec::with_capacity(grid.len());
    for &q in &grid.q_points {
        for x in &grid.x_points {
            out.push(match cfg.transform {
                Transform::Index => spec.mu0(x, &grid.v, q)?,
                Transform::Level => link.eta(spec.mu0(x, &zero, q)?),
                Transform::MarginalEffect => {
                    link.deta(spec.mu0(x, &zero, q)?) * spec.mu0(x, &grid.v, q)?
                }
            });
        }
    }
    Ok(out)
}

/// Empirical uniform coverage of the nominal `1 - alpha` band.
pub fn run_coverage(cfg: ExperimentConfig) -> Result<RunReport> {
    let cfg = cfg.resolve()?;
    let start = Instant::now();
    let sim = SimOptions {
        alpha: cfg.alpha,
        n_draws: cfg.n_draws,
        seed: 0,
    };
    sim.validate()?;
    let (reps, threads) = replicate(&cfg, &cfg.n_ladder.clone(), |spec, data, s| {
        let f = fit_rep(&cfg, spec, data)?;
        let sand = SandwichSet::build(&f, data)?;
        let xs = EvalGrid::cell_points(f.basis.partition(), cfg.x_per_cell);
        let grid = EvalGrid::new(xs, cfg.q_grid().to_vec(), cfg.v().to_vec())?;
        let opts = SimOptions {
            seed: derive_seed(spec.seed, s.rep as u64),
            ..sim
        };
        let band = match cfg.transform {
            Transform::Index => match default_method(&f.loss) {
                SimMethod::BrownianBridge => simulate_band_brownian_bridge(&sand, &grid, &opts)?,
                SimMethod::Generic => simulate_band(&sand, &grid, &opts)?,
            },
            Transform::Level => level_band(&sand, &grid, &opts)?,
            Transform::MarginalEffect => marginal_effect_band(&sand, &grid, &opts)?,
        };
        s.covered = Some(band.covers(&band_truth(&cfg, spec, &grid)?));
        s.crit = Some(band.crit);
        Ok(())
    })?;
    let done: Vec<&RepSummary> = reps.iter().filter(|r| r.covered.is_some()).collect();
    let m = done.len() as f64;
    let coverage = done.iter().filter(|r| r.covered == Some(true)).count() as f64 / m;
    let summary = CoverageSummary {
        coverage,
        se: (coverage * (1.0 - coverage) / m).sqrt(),
        completed: done.len(),
        failed: reps.len() - done.len(),
        mean_crit: done.iter().filter_map(|r| r.crit).sum::<f64>() / m,
    };
    Ok(finish(Study::Coverage, cfg, start, threads, reps, |r| {
        r.coverage = Some(summary)
    }))
}

fn finish(
    study: Study,
    config: ExperimentConfig,
    start: Instant,
    threads: usize,
    reps: Vec<RepSummary>,
    fill: impl FnOnce(&mut RunReport),
) -> RunReport {
    let mut report = RunReport {
        schema_version: SCHEMA_VERSION,
        study,
        config,
        wall_clock_secs: 0.0,
        threads,
        reps,
        coverage: None,
        rates: None,
        bahadur: None,
    };
    fill(&mut report);
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    report
}

fn ladder(cfg: &ExperimentConfig, min_len: usize) -> Result<Vec<usize>> {
    let mut ns = cfg.n_ladder.clone();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < min_len {
        return Err(Error::InvalidInput(format!(
            "an n ladder with at least {min_len} distinct sample sizes is required, got {}",
            ns.len()
        )));
    }
    Ok(ns)
}

/// Sup and L2 errors against the truth, and their log-log slopes in `n`.
pub fn run_rates(cfg: ExperimentConfig) -> Result<RunReport> {
    let cfg = cfg.resolve()?;
    let ns = ladder(&cfg, 4)?;
    let start = Instant::now();
    let pts = cfg.error_points();
    let (reps, threads) = replicate(&cfg, &ns, |spec, data, s| {
        let f = fit_rep(&cfg, spec, data)?;
        let (mut sup, mut ss, mut cnt) = (0.0f64, 0.0, 0usize);
        for (qi, &q) in f.q_grid.iter().enumerate() {
            for x in &pts {
                let e = f.mu_hat(x, cfg.v(), qi)? - spec.mu0(x, cfg.v(), q)?;
                sup = sup.max(e.abs());
                ss += e * e;
                cnt += 1;
            }
        }
        s.sup_error = Some(sup);
        s.l2_error = Some((ss / cnt as f64).sqrt());
        Ok(())
    })?;
    let groups = group_by_n(&ns, &reps);
    let points: Vec<RatePoint> = ns
        .iter()
        .zip(&groups)
        .map(|(&n, g)| RatePoint {
            n,
            cells: cfg.cells_for(n),
            median_sup_error: median(g.iter().filter_map(|r| r.sup_error).collect()),
            median_l2_error: median(g.iter().filter_map(|r| r.l2_error).collect()),
        })
        .collect();
    let sup_slope = slope_with_ci(&ns, &groups, |r| r.sup_error, cfg.bootstrap, cfg.dgp.seed);
    let l2_slope = slope_with_ci(
        &ns,
        &groups,
        |r| r.l2_error,
        cfg.bootstrap,
        cfg.dgp.seed ^ 1,
    );
    let d = cfg.dgp.dim() as f64;
    let m = cfg.order as f64;
    let summary = RatesSummary {
        points,
        sup_slope,
        l2_slope,
        target_slope: -m / (2.0 * m + d),
    };
    Ok(finish(Study::Rates, cfg, start, threads, reps, |r| {
        r.rates = Some(summary)
    }))
}

/// Remainder of the linear representation along the n ladder, using true
/// scores, the true `Psi_1` and the weighted projection of the truth.
pub fn run_bahadur(cfg: ExperimentConfig) -> Result<RunReport> {
    let cfg = cfg.resolve()?;
    let ns = ladder(&cfg, 2)?;
    let start = Instant::now();
    let pts = cfg.error_points();
    let (reps, threads) = replicate(&cfg, &ns, |spec, data, s| {
        let f = fit_rep(&cfg, spec, data)?;
        let (rem, rem_truth, lin) = bahadur_sups(spec, data, &f, &pts, cfg.v())?;
        s.remainder = Some(rem);
        s.remainder_vs_truth = Some(rem_truth);
        s.linear = Some(lin);
        Ok(())
    })?;
    let groups = group_by_n(&ns, &reps);
    let points: Vec<BahadurPoint> = ns
        .iter()
        .zip(&groups)
        .map(|(&n, g)| BahadurPoint {
            n,
            cells: cfg.cells_for(n),
            median_remainder: median(g.iter().filter_map(|r| r.remainder).collect()),
            median_remainder_vs_truth: median(
                g.iter().filter_map(|r| r.remainder_vs_truth).collect(),
            ),
            median_linear: median(g.iter().filter_map(|r| r.linear).collect()),
            median_ratio: median(g.iter().filter_map(|r| r.ratio()).collect()),
        })
        .collect();
    let decay_factor = points[0].median_ratio / points[points.len() - 1].median_ratio;
    let summary = BahadurSummary {
        points,
        decay_factor,
    };
    Ok(finish(Study::Bahadur, cfg, start, threads, reps, |r| {
        r.bahadur = Some(summary)
    }))
}

/// `(sup |mu_hat - p' beta_* - L|, sup |mu_hat - mu_0 - L|, sup |L|)` over points and the fit grid.
pub fn bahadur_sups(
    spec: &DgpSpec,
    data: &Dataset,
    f: &FitResult,
    pts: &[Vec<f64>],
    v: &[usize],
) -> Result<(f64, f64, f64)> {
    let rows = &f.design_or_err()?.rows;
    let zero = vec![0; data.dim()];
    let link = &f.loss.link;
    let k = f.basis.len();
    let (mut rem, mut rem_truth, mut lin) = (0.0f64, 0.0f64, 0.0f64);
    for (qi, &q) in f.q_grid.iter().enumerate() {
        let theta: Vec<f64> = (0..data.n())
            .map(|i| spec.mu0(data.row(i), &zero, q))
            .collect::<Result<_>>()?;
        let psi1: Vec<f64> = (0..data.n())
            .map(|i| spec.psi1(data.row(i), q))
            .collect::<Result<_>>()?;
        let l = linear_term(&f.basis, rows, data.y(), &f.loss, &theta, &psi1, q, pts, v)?;
        // Weighted projection beta_* = E_n[w p p']^{-1} E_n[w p mu_0], w = Psi_1 eta'^2.
        let mut g = BandedMatrix::zeros(k, f.basis.bandwidth());
        let mut rhs = vec![0.0; k];
        for (i, r) in rows.iter().enumerate() {
            let w = psi1[i] * link.deta(theta[i]).powi(2);
            g.add_outer(&r.indices, &r.values, w);
            for (j, val) in r.iter() {
                rhs[j] += w * val * theta[i];
            }
        }
        let chol = g.cholesky().map_err(|e| Error::SingularQ {
            q,
            min_pivot: e.pivot,
        })?;
        let beta_star = chol.solve(&rhs);
        for (x, lv) in pts.iter().zip(&l) {
            let p = f.basis.eval(x, v)?;
            let mu_hat = p.dot(&f.beta[qi]);
            rem = rem.max((mu_hat - p.dot(&beta_star) - lv).abs());
            rem_truth = rem_truth.max((mu_hat - spec.mu0(x, v, q)? - lv).abs());
            lin = lin.max(lv.abs());
        }
    }
    Ok((rem, rem_truth, lin))
}

fn group_by_n<'a>(ns: &[usize], reps: &'a [RepSummary]) -> Vec<Vec<&'a RepSummary>> {
    ns.iter()
        .map(|&n| {
            reps.iter()
                .filter(|r| r.n == n && r.error.is_none())
                .collect()
        })
        .collect()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// Least-squares slope of `log y` on `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn slope_with_ci(
    ns: &[usize],
    groups: &[Vec<&RepSummary>],
    value: impl Fn(&RepSummary) -> Option<f64>,
    b: usize,
    seed: u64,
) -> Slope {
    let x: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let vals: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| g.iter().filter_map(|r| value(r)).collect())
        .collect();
    let meds: Vec<f64> = vals.iter().map(|v| median(v.clone())).collect();
    let estimate = log_log_slope(&x, &meds);
    let mut boot: Vec<f64> = (0..b)
        .map(|j| {
            let mut rng = substream(seed, tags::BOOTSTRAP, j as u64);
            let meds: Vec<f64> = vals
                .iter()
                .map(|v| {
                    median(
                        (0..v.len())
                            .map(|_| v[rng.random_range(0..v.len())])
                            .collect(),
                    )
                })
                .collect();
            log_log_slope(&x, &meds)
        })
        .collect();
    boot.sort_by(f64::total_cmp);
    let ci = if boot.is_empty() {
        (estimate, estimate)
    } else {
        (order_statistic(&boot, 0.025), order_statistic(&boot, 0.975))
    };
    Slope { estimate, ci }
}

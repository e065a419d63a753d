//! Uniform inference: the t-process, Gaussian simulation of its conditional
//! approximation `Z_hat(x, q) = ell_hat(x, q)' N(q)`, supremum critical values
//! and confidence bands, plus the level, marginal-effect and treatment-effect
//! transforms.
//!
//! `N(q)` is a mean-zero Gaussian vector process on the `q` grid with
//! `Cov(N(q), N(q')) = Sigma_hat(q, q')`. For quantile regression with the
//! identity link it is a `K`-dimensional Brownian bridge premultiplied by a
//! square root of `E_n[p p']`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::banded::BandedCholesky;
use crate::basis::SparseVec;
use crate::error::{Error, Result};
use crate::loss::{LossKind, LossModel};
use crate::partition::Partition;
use crate::rng::{substream, tags};
use crate::sandwich::SandwichSet;
use crate::solver::FitResult;

/// Evaluation points of the process; point `s` is `(x_points[s % nx], q_points[s / nx])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub x_points: Vec<Vec<f64>>,
    pub q_points: Vec<f64>,
    pub v: Vec<usize>,
}

impl EvalGrid {
    pub fn new(x_points: Vec<Vec<f64>>, q_points: Vec<f64>, v: Vec<usize>) -> Result<Self> {
        if x_points.is_empty() || q_points.is_empty() {
            return Err(Error::InvalidInput(
                "evaluation grid must be nonempty".into(),
            ));
        }
        if !q_points.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidInput(
                "grid q points must be strictly increasing".into(),
            ));
        }
        if x_points.iter().any(|x| x.len() != v.len()) {
            return Err(Error::InvalidInput(
                "x points and derivative multi-index differ in dimension".into(),
            ));
        }
        Ok(Self {
            x_points,
            q_points,
            v,
        })
    }

    /// `per_dim` equispaced interior points per cell and coordinate, tensorized.
    pub fn cell_points(partition: &Partition, per_dim: usize) -> Vec<Vec<f64>> {
        let axes: Vec<Vec<f64>> = partition
            .knots()
            .iter()
            .map(|kn| {
                kn.windows(2)
                    .flat_map(|w| {
                        (0..per_dim)
                            .map(move |j| w[0] + (w[1] - w[0]) * (j as f64 + 0.5) / per_dim as f64)
                    })
                    .collect()
            })
            .collect();
        let total: usize = axes.iter().map(Vec::len).product();
        (0..total)
            .map(|mut r| {
                axes.iter()
                    .map(|axis| {
                        let v = axis[r % axis.len()];
                        r /= axis.len();
                        v
                    })
                    .collect()
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.x_points.len() * self.q_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(x index, q index within q_points)` of point `s`.
    pub fn point(&self, s: usize) -> (usize, usize) {
        (s % self.x_points.len(), s / self.x_points.len())
    }

    fn fit_indices(&self, fit: &FitResult) -> Result<Vec<usize>> {
        fit.basis.check_v(&self.v)?;
        self.q_points
            .iter()
            .map(|&q| {
                fit.q_index(q)
                    .ok_or_else(|| Error::InvalidInput(format!("q = {q} is not on the fit grid")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub alpha: f64,
    pub n_draws: usize,
    pub seed: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            n_draws: 20_000,
            seed: 0,
        }
    }
}

impl SimOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 0.5) {
            return Err(Error::InvalidInput(format!(
                "alpha must lie in (0, 0.5], got {}",
                self.alpha
            )));
        }
        if self.n_draws < 1000 {
            return Err(Error::InvalidInput(format!(
                "at least 1000 draws required, got {}",
                self.n_draws
            )));
        }
        Ok(())
    }
}

/// Summary of the simulated supremum statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupSummary {
    pub mean: f64,
    pub sd: f64,
    pub q50: f64,
    pub q90: f64,
    pub q95: f64,
    pub q99: f64,
}

impl SupSummary {
    fn from_sorted(s: &[f64]) -> Self {
        let n = s.len() as f64;
        let mean = s.iter().sum::<f64>() / n;
        let sd = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
        Self {
            mean,
            sd,
            q50: order_statistic(s, 0.5),
            q90: order_statistic(s, 0.9),
            q95: order_statistic(s, 0.95),
            q99: order_statistic(s, 0.99),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandResult {
    pub grid: EvalGrid,
    /// `mu_hat^(v)(x, q)` per grid point.
    pub mu_hat: Vec<f64>,
    /// Band centre (equal to `mu_hat` for the base band).
    pub center: Vec<f64>,
    /// `Omega_hat(x, q)` per grid point.
    pub omega: Vec<f64>,
    /// Standard error of the centre, so that the band is `center +- crit * se`.
    pub se: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub crit: f64,
    pub alpha: f64,
    pub n_draws: usize,
    pub seed: u64,
    pub sup: SupSummary,
}

impl BandResult {
    /// Whether `truth[s]` lies in `[lo[s], hi[s]]` for every point.
    pub fn covers(&self, truth: &[f64]) -> bool {
        truth
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(t, (l, h))| l <= t && t <= h)
    }

    fn assemble(
        grid: EvalGrid,
        mu_hat: Vec<f64>,
        center: Vec<f64>,
        omega: Vec<f64>,
        se: Vec<f64>,
        sups: &[f64],
        opts: &SimOptions,
    ) -> Self {
        let crit = critical_value(sups, opts.alpha);
        let lo = center.iter().zip(&se).map(|(c, s)| c - crit * s).collect();
        let hi = center.iter().zip(&se).map(|(c, s)| c + crit * s).collect();
        Self {
            grid,
            mu_hat,
            center,
            omega,
            se,
            lo,
            hi,
            crit,
            alpha: opts.alpha,
            n_draws: opts.n_draws,
            seed: opts.seed,
            sup: SupSummary::from_sorted(sups),
        }
    }
}

/// `ceil(p N)`-th order statistic of a sorted sample.
pub fn order_statistic(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let r = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[r - 1]
}

/// `c_{1-alpha}`: the `ceil((1 - alpha) N)`-th order statistic of sorted sup draws.
pub fn critical_value(sorted_sups: &[f64], alpha: f64) -> f64 {
    order_statistic(sorted_sups, 1.0 - alpha)
}

/// How the Gaussian vector process `N(q)` is generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMethod {
    /// Factor the full grid covariance built from `Sigma_hat(q, q')`.
    Generic,
    /// Brownian bridge construction (quantile regression, identity link).
    BrownianBridge,
}

enum Sampler {
    Generic { factor: DMatrix<f64> },
    Bridge { gram: BandedCholesky, qs: Vec<f64> },
}

/// Conditional Gaussian approximation of the t-process on an evaluation grid.
pub struct GaussianProcess {
    k: usize,
    nx: usize,
    /// `p^(v)(x)` for every grid point, point-major.
    rows: Vec<SparseVec>,
    /// `1 / sqrt(Omega_hat)` per grid point.
    inv_sd: Vec<f64>,
    /// Factorizations of `Q_hat(q)` for the grid q's.
    chols: Vec<BandedCholesky>,
    omega: Vec<f64>,
    mu_hat: Vec<f64>,
    sampler: Sampler,
}

impl GaussianProcess {
    pub fn new(sand: &SandwichSet<'_>, grid: &EvalGrid, method: SimMethod) -> Result<Self> {
        let fit = sand.fit();
        let qidx = grid.fit_indices(fit)?;
        let k = fit.basis.len();
        let nx = grid.x_points.len();
        let xrows: Vec<SparseVec> = grid
            .x_points
            .iter()
            .map(|x| fit.basis.eval(x, &grid.v))
            .collect::<Result<_>>()?;
        let mut rows = Vec::with_capacity(grid.len());
        let mut inv_sd = Vec::with_capacity(grid.len());
        let mut omega = Vec::with_capacity(grid.len());
        let mut mu_hat = Vec::with_capacity(grid.len());
        for &qi in &qidx {
            for (x, r) in grid.x_points.iter().zip(&xrows) {
                let o = sand.omega(x, &grid.v, qi)?;
                rows.push(r.clone());
                inv_sd.push(1.0 / o.sqrt());
                omega.push(o);
                mu_hat.push(r.dot(&fit.beta[qi]));
            }
        }
        let chols = qidx.iter().map(|&qi| sand.cholesky(qi).clone()).collect();
        let sampler = match method {
            SimMethod::Generic => Sampler::Generic {
                factor: grid_covariance_factor(sand, &qidx)?,
            },
            SimMethod::BrownianBridge => {
                if fit.loss.kind != LossKind::Quantile || !fit.loss.link.is_identity() {
                    return Err(Error::WrongModel {
                        expected: "quantile regression with identity link",
                    });
                }
                let design = fit.design_or_err()?;
                let gram = design.gram(k, fit.basis.bandwidth());
                let gram = gram.cholesky().map_err(|e| Error::SingularQ {
                    q: grid.q_points[0],
                    min_pivot: e.pivot,
                })?;
                Sampler::Bridge {
                    gram,
                    qs: grid.q_points.clone(),
                }
            }
        };
        Ok(Self {
            k,
            nx,
            rows,
            inv_sd,
            chols,
            omega,
            mu_hat,
            sampler,
        })
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn mu_hat(&self) -> &[f64] {
        &self.mu_hat
    }

    /// Values of `Z_hat` at every grid point for one draw.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let k = self.k;
        let nq = self.chols.len();
        let blocks: Vec<Vec<f64>> = match &self.sampler {
            Sampler::Generic { factor } => {
                let xi =
                    DVector::from_fn(factor.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
                let z = factor * xi;
                (0..nq)
                    .map(|j| z.as_slice()[j * k..(j + 1) * k].to_vec())
                    .collect()
            }
            Sampler::Bridge { gram, qs } => {
                // Brownian motion per coordinate at the grid q's and at 1.
                let mut w = vec![vec![0.0; k]; qs.len()];
                let mut prev = 0.0;
                let mut cur = vec![0.0; k];
                for (j, &q) in qs.iter().enumerate() {
                    let s = (q - prev).sqrt();
                    for c in cur.iter_mut() {
                        *c += s * rng.sample::<f64, _>(StandardNormal);
                    }
                    w[j].clone_from(&cur);
                    prev = q;
                }
                let s = (1.0 - prev).max(0.0).sqrt();
                let w1: Vec<f64> = cur
                    .iter()
                    .map(|c| c + s * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                qs.iter()
                    .zip(w)
                    .map(|(&q, wq)| {
                        let b: Vec<f64> = wq.iter().zip(&w1).map(|(a, e)| a - q * e).collect();
                        gram.mul_lower(&b)
                    })
                    .collect()
            }
        };
        // ell' N(q) = p' Q^{-1} N(q) / sqrt(Omega): one banded solve per q.
        let solved: Vec<Vec<f64>> = blocks
            .into_iter()
            .zip(&self.chols)
            .map(|(mut z, c)| {
                c.solve_in_place(&mut z);
                z
            })
            .collect();
        self.rows
            .iter()
            .enumerate()
            .map(|(s, r)| r.dot(&solved[s / self.nx]) * self.inv_sd[s])
            .collect()
    }

    /// Sorted supremum statistics `sup_s |w_s Z_hat_s|` over `n_draws` counter-indexed draws.
    pub fn sup_draws(&self, n_draws: usize, seed: u64, tag: u64) -> Vec<f64> {
        let mut sups: Vec<f64> = (0..n_draws)
            .into_par_iter()
            .map(|r| {
                let mut rng = substream(seed, tag, r as u64);
                self.draw(&mut rng)
                    .into_iter()
                    .fold(0.0f64, |m, z| m.max(z.abs()))
            })
            .collect();
        sups.sort_by(f64::total_cmp);
        sups
    }

    /// Raw draws (draw-major) for diagnostics.
    pub fn sample(&self, n_draws: usize, seed: u64) -> Vec<Vec<f64>> {
        (0..n_draws)
            .into_par_iter()
            .map(|r| self.draw(&mut substream(seed, tags::DRAWS, r as u64)))
            .collect()
    }
}

/// Lower factor `L` with `L L' = [Sigma_hat(q_a, q_b)]_{a,b}` (jittered, then eigen-clipped).
fn grid_covariance_factor(sand: &SandwichSet<'_>, qidx: &[usize]) -> Result<DMatrix<f64>> {
    let k = sand.fit().basis.len();
    let g = qidx.len();
    let pairs: Vec<(usize, usize)> = (0..g).flat_map(|a| (0..=a).map(move |b| (a, b))).collect();
    let blocks: Vec<_> = pairs
        .par_iter()
        .map(|&(a, b)| sand.sigma_hat(qidx[a], qidx[b]).map(|m| m.to_nalgebra()))
        .collect::<Result<_>>()?;
    let mut cov = DMatrix::<f64>::zeros(k * g, k * g);
    for (&(a, b), blk) in pairs.iter().zip(&blocks) {
        cov.view_mut((a * k, b * k), (k, k)).copy_from(blk);
        cov.view_mut((b * k, a * k), (k, k))
            .copy_from(&blk.transpose());
    }
    psd_factor(cov)
}

/// Cholesky factor of a covariance with jitter escalation `1e-12 .. 1e-8`
/// times the mean diagonal, falling back to an eigen-clipped square root.
pub fn psd_factor(cov: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let dim = cov.nrows();
    let scale = (cov.trace() / dim as f64).abs().max(f64::MIN_POSITIVE);
    if let Some(c) = cov.clone().cholesky() {
        return Ok(c.l());
    }
    for jitter in [1e-12, 1e-11, 1e-10, 1e-9, 1e-8] {
        let mut m = cov.clone();
        for i in 0..dim {
            m[(i, i)] += jitter * scale;
        }
        if let Some(c) = m.cholesky() {
            return Ok(c.l());
        }
    }
    let repaired = psd_repair(&cov);
    let eig = SymmetricEigen::new(repaired);
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::CovarianceNotPsd);
    }
    let sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * sqrt)
}

/// Symmetrizes and clips negative eigenvalues at zero.
pub fn psd_repair(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return sym;
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0)));
    let out = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

fn sample_size(fit: &FitResult) -> Result<f64> {
    Ok(fit.design_or_err()?.rows.len() as f64)
}

/// `T(x, q) = (mu_hat - mu0) / sqrt(Omega_hat / n)`; without `mu0`, the studentized estimate.
pub fn t_process(sand: &SandwichSet<'_>, grid: &EvalGrid, mu0: Option<&[f64]>) -> Result<Vec<f64>> {
    let fit = sand.fit();
    let qidx = grid.fit_indices(fit)?;
    if let Some(m) = mu0 {
        if m.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "truth has {} values, grid has {}",
                m.len(),
                grid.len()
            )));
        }
    }
    let n = sample_size(fit)?;
    let mut out = Vec::with_capacity(grid.len());
    for (j, &qi) in qidx.iter().enumerate() {
        for (i, x) in grid.x_points.iter().enumerate() {
            let s = j * grid.x_points.len() + i;
            let omega = sand.omega(x, &grid.v, qi)?;
            let centre = mu0.map_or(0.0, |m| m[s]);
            out.push((fit.mu_hat(x, &grid.v, qi)? - centre) / (omega / n).sqrt());
        }
    }
    Ok(out)
}

fn base_band(
    sand: &SandwichSet<'_>,
    grid: &EvalGrid,
    opts: &SimOptions,
    method: SimMethod,
) -> Result<BandResult> {
    opts.validate()?;
    let proc_ = GaussianProcess::new(sand, grid, method)?;
    let n = sample_size(sand.fit())?;
    let se: Vec<f64> = proc_.omega.iter().map(|o| (o / n).sqrt()).collect();
    let sups = proc_.sup_draws(opts.n_draws, opts.seed, tags::DRAWS);
    Ok(BandResult::assemble(
        grid.clone(),
        proc_.mu_hat.clone(),
        proc_.mu_hat.clone(),
        proc_.omega.clone(),
        se,
        &sups,
        opts,
    ))
}

/// Uniform band `mu_hat +- c sqrt(Omega_hat / n)` from the generic simulation.
pub fn simulate_band(
    sand: &SandwichSet<'_>,
    grid: &EvalGrid,
    opts: &SimOptions,
) -> Result<BandResult> {
    base_band(sand, grid, opts, SimMethod::Generic)
}

/// As [`simulate_band`] with the Brownian bridge construction of `N(q)`.
pub fn simulate_band_brownian_bridge(
    sand: &SandwichSet<'_>,
    grid: &EvalGrid,
    opts: &SimOptions,
) -> Result<BandResult> {
    base_band(sand, grid, opts, SimMethod::BrownianBridge)
}

/// Brownian bridge for identity-link quantile fits, generic simulation otherwise.
pub fn default_method(loss: &LossModel) -> SimMethod {
    if loss.kind == LossKind::Quantile && loss.link.is_identity() {
        SimMethod::BrownianBridge
    } else {
        SimMethod::Generic
    }
}

/// Band for `eta(mu_0(x, q))`: the base band mapped through `eta`, centred at `eta(mu_hat)`.
///
/// `se` reports the delta-method standard error `|eta'(mu_hat)| sqrt(Omega_hat / n)`;
/// the limits are `eta(mu_hat -+ c sqrt(Omega_hat / n))`, so the band covers
/// `eta(mu_0)` exactly when the base band covers `mu_0`.
pub fn level_band(
    sand: &SandwichSet<'_>,
    grid: &EvalGrid,
    opts: &SimOptions,
) -> Result<BandResult> {
    if grid.v.iter().any(|&v| v != 0) {
        return Err(Error::InvalidInput("level band requires v = 0".into()));
    }
    let link = &sand.fit().loss.link;
    let mut b = base_band(sand, grid, opts, default_method(&sand.fit().loss))?;
    for s in 0..b.mu_hat.len() {
        let m = b.mu_hat[s];
        let (lo, hi) = (link.eta(b.lo[s]), link.eta(b.hi[s]));
        b.lo[s] = lo.min(hi);
        b.hi[s] = lo.max(hi);
        b.center[s] = link.eta(m);
        b.se[s] *= link.deta(m).abs();
    }
    Ok(b)
}

/// Band for `eta'(mu_0) mu_0^(e_k)`; `grid.v` must be a unit multi-index.
pub fn marginal_effect_band(
    sand: &SandwichSet<'_>,
    grid: &EvalGrid,
    opts: &SimOptions,
) -> Result<BandResult> {
    if grid.v.iter().sum::<usize>() != 1 {
        return Err(Error::InvalidInput(
            "marginal effect band requires |v| = 1".into(),
        ));
    }
    let fit = sand.fit();
    let qidx = grid.fit_indices(fit)?;
    let zero = vec![0; grid.v.len()];
    let link = &fit.loss.link;
    let mut b = base_band(sand, grid, opts, default_method(&fit.loss))?;
    for (j, &qi) in qidx.iter().enumerate() {
        for (i, x) in grid.x_points.iter().enumerate() {
            let s = j * grid.x_points.len() + i;
            let d = link.deta(fit.mu_hat(x, &zero, qi)?);
            b.center[s] = d * b.mu_hat[s];
            b.se[s] *= d.abs();
        }
    }
    Ok(rebuild(b))
}

fn rebuild(mut b: BandResult) -> BandResult {
    b.lo = b
        .center
        .iter()
        .zip(&b.se)
        .map(|(c, s)| c - b.crit * s)
        .collect();
    b.hi = b
        .center
        .iter()
        .zip(&b.se)
        .map(|(c, s)| c + b.crit * s)
        .collect();
    b
}

/// Band for `eta(mu_2(x, q)) - eta(mu_1(x, q))` from fits on disjoint subsamples.
///
/// `omega` reports the variance of the centre, `sum_j eta'(mu_hat_j)^2 Omega_hat_j / n_j`.
pub fn cte_band(
    sand1: &SandwichSet<'_>,
    sand2: &SandwichSet<'_>,
    grid: &EvalGrid,
    opts: &SimOptions,
) -> Result<BandResult> {
    opts.validate()?;
    let (f1, f2) = (sand1.fit(), sand2.fit());
    if f1.basis != f2.basis || f1.loss != f2.loss {
        return Err(Error::BasisMismatch);
    }
    if grid.v.iter().any(|&v| v != 0) {
        return Err(Error::InvalidInput(
            "treatment effect band requires v = 0".into(),
        ));
    }
    let method = default_method(&f1.loss);
    let p1 = GaussianProcess::new(sand1, grid, method)?;
    let p2 = GaussianProcess::new(sand2, grid, method)?;
    let (n1, n2) = (sample_size(f1)?, sample_size(f2)?);
    let link = &f1.loss.link;
    let s1: Vec<f64> = p1
        .mu_hat
        .iter()
        .zip(&p1.omega)
        .map(|(m, o)| link.deta(*m).abs() * (o / n1).sqrt())
        .collect();
    let s2: Vec<f64> = p2
        .mu_hat
        .iter()
        .zip(&p2.omega)
        .map(|(m, o)| link.deta(*m).abs() * (o / n2).sqrt())
        .collect();
    let se: Vec<f64> = s1
        .iter()
        .zip(&s2)
        .map(|(a, b)| (a * a + b * b).sqrt())
        .collect();
    let mut sups: Vec<f64> = (0..opts.n_draws)
        .into_par_iter()
        .map(|r| {
            let z1 = p1.draw(&mut substream(opts.seed, tags::DRAWS, r as u64));
            let z2 = p2.draw(&mut substream(opts.seed, tags::DRAWS_SECOND, r as u64));
            (0..se.len()).fold(0.0f64, |m, s| {
                m.max(((s2[s] * z2[s] - s1[s] * z1[s]) / se[s]).abs())
            })
        })
        .collect();
    sups.sort_by(f64::total_cmp);
    let center: Vec<f64> = p1
        .mu_hat
        .iter()
        .zip(&p2.mu_hat)
        .map(|(a, b)| link.eta(*b) - link.eta(*a))
        .collect();
    let omega: Vec<f64> = se.iter().map(|s| s * s).collect();
    let mu_hat = p2
        .mu_hat
        .iter()
        .zip(&p1.mu_hat)
        .map(|(b, a)| b - a)
        .collect();
    Ok(BandResult::assemble(
        grid.clone(),
        mu_hat,
        center,
        omega,
        se,
        &sups,
        opts,
    ))
}

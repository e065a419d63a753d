//! Coefficient-process fitting: `beta_hat(q)` minimizing the empirical
//! composite loss `E_n[rho(y_i, eta(p(x_i)' b); q)]` for each `q` on a grid.
//!
//! Dispatch:
//! * unconnected bases (piecewise polynomials, or order 1) solve every cell
//!   independently; order one reduces to a scalar problem (an order
//!   statistic for the check loss);
//! * connected bases run a damped Newton method with a banded Hessian; the
//!   check loss is replaced by a sequence of Moreau envelopes with shrinking
//!   parameter, followed by subgradient polishing;
//! * losses that are not convex in the index are solved inside the box
//!   `|b|_inf <= R` with the projected variant.
//!
//! Grid points are solved in increasing order, each warm-started from the
//! previous solution.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::banded::BandedMatrix;
use crate::basis::{Basis, BasisKind, SparseVec};
use crate::error::{Error, Result};
use crate::loss::{LossKind, LossModel};

/// Covariates (row-major `n x d`) and responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    d: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Dataset {
    pub fn new(d: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if d == 0 || x.len() != d * y.len() {
            return Err(Error::InvalidInput(format!(
                "covariate buffer of length {} does not match {} rows of dimension {d}",
                x.len(),
                y.len()
            )));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite covariate at row {}",
                i / d
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite response at row {i}"
            )));
        }
        Ok(Self { d, x, y })
    }

    pub fn from_rows(rows: &[Vec<f64>], y: Vec<f64>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidInput("ragged covariate rows".into()));
        }
        Self::new(d, rows.concat(), y)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Keeps the rows selected by `keep`.
    pub fn subset(&self, keep: impl Fn(usize) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.n()).filter(|&i| keep(i)).collect();
        Self {
            d: self.d,
            x: idx
                .iter()
                .flat_map(|&i| self.row(i).iter().copied())
                .collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Same covariates with `f` applied to the responses.
    pub fn map_y(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            d: self.d,
            x: self.x.clone(),
            y: self.y.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxRadius {
    /// No constraint; an error for losses that are not convex in the index.
    Off,
    /// Twice the sup-norm of a pilot piecewise-constant fit, floored at 1.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Tolerance on the scaled gradient sup-norm.
    pub grad_tol: f64,
    pub box_radius: BoxRadius,
    /// Initial smoothing parameter for the check loss; `None` means `0.1 * IQR(y)`.
    pub smoothing_tau0: Option<f64>,
    pub smoothing_decay: f64,
    /// Final smoothing parameter as a fraction of `IQR(y)`.
    pub smoothing_floor: f64,
    pub polish_steps: usize,
    /// Minimum observations per cell; `None` means `3 m^d`.
    pub min_obs_per_cell: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            grad_tol: 1e-8,
            box_radius: BoxRadius::Auto,
            smoothing_tau0: None,
            smoothing_decay: 0.5,
            smoothing_floor: 1e-4,
            polish_steps: 200,
            min_obs_per_cell: None,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iter > 0
            && self.grad_tol > 0.0
            && self.smoothing_decay > 0.0
            && self.smoothing_decay < 1.0
            && self.smoothing_floor > 0.0
            && self.smoothing_tau0.is_none_or(|t| t > 0.0)
            && !matches!(self.box_radius, BoxRadius::Fixed(r) if !(r > 0.0))
            && self.min_obs_per_cell.is_none_or(|m| m > 0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "invalid solver options {self:?}"
            )))
        }
    }
}

/// Basis evaluations `p(x_i)` and cell memberships, shared by every `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignCache {
    pub rows: Vec<SparseVec>,
    pub cells: Vec<usize>,
    pub by_cell: Vec<Vec<usize>>,
}

impl DesignCache {
    pub fn build(data: &Dataset, basis: &Basis) -> Result<Self> {
        if data.dim() != basis.dim() {
            return Err(Error::InvalidInput(format!(
                "data has dimension {}, basis has {}",
                data.dim(),
                basis.dim()
            )));
        }
        let zero = vec![0usize; basis.dim()];
        let mut rows = Vec::with_capacity(data.n());
        let mut cells = Vec::with_capacity(data.n());
        let mut by_cell = vec![Vec::new(); basis.partition().cell_count()];
        for i in 0..data.n() {
            let mut sv = SparseVec::default();
            let cell = basis.eval_into(data.row(i), &zero, &mut sv)?;
            rows.push(sv);
            cells.push(cell);
            by_cell[cell].push(i);
        }
        Ok(Self {
            rows,
            cells,
            by_cell,
        })
    }

    /// `E_n[p p']`.
    pub fn gram(&self, k: usize, bw: usize) -> BandedMatrix {
        let mut g = BandedMatrix::zeros(k, bw);
        for r in &self.rows {
            g.add_outer(&r.indices, &r.values, 1.0);
        }
        g.scale(1.0 / self.rows.len() as f64);
        g
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub basis: Basis,
    pub loss: LossModel,
    pub options: SolverOptions,
    pub q_grid: Vec<f64>,
    /// `beta[j]` is the coefficient vector at `q_grid[j]`.
    pub beta: Vec<Vec<f64>>,
    pub converged: Vec<bool>,
    pub grad_norm: Vec<f64>,
    pub objective: Vec<f64>,
    pub iterations: Vec<usize>,
    pub box_radius: Option<f64>,
    #[serde(skip)]
    design: Option<Arc<DesignCache>>,
}

impl FitResult {
    pub fn design(&self) -> Option<&Arc<DesignCache>> {
        self.design.as_ref()
    }

    /// Rebuilds the design cache after deserialization.
    pub fn attach(&mut self, data: &Dataset) -> Result<()> {
        self.design = Some(Arc::new(DesignCache::build(data, &self.basis)?));
        Ok(())
    }

    pub fn design_or_err(&self) -> Result<&Arc<DesignCache>> {
        self.design
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("fit has no design cache; call attach".into()))
    }

    pub fn q_index(&self, q: f64) -> Option<usize> {
        self.q_grid
            .iter()
            .position(|&g| (g - q).abs() <= 1e-12 * (1.0 + q.abs()))
    }

    /// `mu_hat^(v)(x, q_grid[qi])`.
    pub fn mu_hat(&self, x: &[f64], v: &[usize], qi: usize) -> Result<f64> {
        Ok(self.basis.eval(x, v)?.dot(&self.beta[qi]))
    }

    /// Fitted index at observation `i`.
    pub fn fitted_index(&self, i: usize, qi: usize) -> Result<f64> {
        Ok(self.design_or_err()?.rows[i].dot(&self.beta[qi]))
    }

    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|&c| c)
    }
}

/// Fits `beta_hat(q)` for every `q` in `q_grid`.
pub fn fit(
    data: &Dataset,
    basis: &Basis,
    loss: &LossModel,
    q_grid: &[f64],
    opts: &SolverOptions,
) -> Result<FitResult> {
    if let Some(&q) = q_grid.iter().find(|&&q| !loss.contains_q(q)) {
        return Err(Error::InvalidInput(format!(
            "q = {q} lies outside the loss domain [{}, {}]",
            loss.q_domain.0, loss.q_domain.1
        )));
    }
    fit_unchecked(data, basis, loss, q_grid, opts)
}

/// As [`fit`] without the loss-domain check on `q_grid`; used for auxiliary fits.
pub fn fit_unchecked(
    data: &Dataset,
    basis: &Basis,
    loss: &LossModel,
    q_grid: &[f64],
    opts: &SolverOptions,
) -> Result<FitResult> {
    opts.validate()?;
    if q_grid.is_empty() {
        return Err(Error::InvalidInput("empty q grid".into()));
    }
    if !q_grid.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::InvalidInput(
            "q grid must be strictly increasing".into(),
        ));
    }
    loss.validate_responses(data.y())?;
    let design = Arc::new(DesignCache::build(data, basis)?);
    check_cells(&design, basis, opts)?;
    if data.n() < basis.len() {
        return Err(Error::InvalidInput(format!(
            "n = {} is smaller than K = {}",
            data.n(),
            basis.len()
        )));
    }
    let box_r = resolve_box(data, basis, loss, q_grid, opts, &design)?;
    let ctx = SolveCtx {
        loss,
        opts,
        box_r,
        tau_scale: iqr(data.y()),
        n_total: data.n() as f64,
    };

    let per_q: Vec<QSolution> = if basis.is_unconnected() {
        solve_by_cell(data, basis, &design, q_grid, &ctx)?
    } else {
        let rows: Vec<&SparseVec> = design.rows.iter().collect();
        let prob = Problem::new(&rows, data.y(), basis.len(), basis.bandwidth(), ctx.n_total);
        let mut beta =
            constant_coefficients(basis, initial_index(data.y(), loss, q_grid[0], box_r));
        let mut out = Vec::with_capacity(q_grid.len());
        for &q in q_grid {
            let s = solve_block(&prob, &ctx, q, &beta);
            beta.clone_from(&s.beta);
            out.push(s);
        }
        out
    };

    let mut fit = FitResult {
        basis: basis.clone(),
        loss: loss.clone(),
        options: *opts,
        q_grid: q_grid.to_vec(),
        beta: Vec::with_capacity(q_grid.len()),
        converged: Vec::new(),
        grad_norm: Vec::new(),
        objective: Vec::new(),
        iterations: Vec::new(),
        box_radius: box_r,
        design: Some(design),
    };
    for s in per_q {
        fit.beta.push(s.beta);
        fit.converged.push(s.converged);
        fit.grad_norm.push(s.grad_norm);
        fit.objective.push(s.objective);
        fit.iterations.push(s.iterations);
    }
    Ok(fit)
}

/// Box radius from a pilot piecewise-constant fit: `max(2 sup |theta_cell(q)|, 1)`.
pub fn auto_box_radius(
    data: &Dataset,
    basis: &Basis,
    loss: &LossModel,
    q_grid: &[f64],
) -> Result<f64> {
    if q_grid.is_empty() {
        return Err(Error::InvalidInput("empty q grid".into()));
    }
    let design = DesignCache::build(data, basis)?;
    let pilot_opts = SolverOptions::default();
    check_cells(&design, basis, &pilot_opts)?;
    let (lo, hi) = response_index_range(data.y(), loss);
    let mut sup = 0.0f64;
    for idx in &design.by_cell {
        let ys: Vec<f64> = idx.iter().map(|&i| data.y()[i]).collect();
        for &q in q_grid {
            let (theta, _) = solve_scalar(&ys, loss, q, Some((lo, hi)));
            sup = sup.max(theta.abs());
        }
    }
    Ok((2.0 * sup).max(1.0))
}

/// Exact minimizer of a single cell's objective.
///
/// `rows` are local basis evaluations with indices in `0..k_local`.
pub fn fit_per_cell(
    rows: &[SparseVec],
    y: &[f64],
    k_local: usize,
    loss: &LossModel,
    q: f64,
    opts: &SolverOptions,
    box_r: Option<f64>,
) -> Result<Vec<f64>> {
    let required = opts.min_obs_per_cell.unwrap_or(3 * k_local);
    if rows.len() < required {
        return Err(Error::CellTooSparse {
            cell: 0,
            count: rows.len(),
            required,
        });
    }
    let ctx = SolveCtx {
        loss,
        opts,
        box_r,
        tau_scale: iqr(y),
        n_total: y.len() as f64,
    };
    let refs: Vec<&SparseVec> = rows.iter().collect();
    let prob = Problem::new(&refs, y, k_local, k_local.saturating_sub(1), ctx.n_total);
    let init = initial_local(y, loss, q, box_r, k_local);
    Ok(solve_cell(&prob, &ctx, q, &init, y).beta)
}

/// Gradient tolerance of the smoothing stages above the floor.
const STAGE_TOL: f64 = 1e-4;

/// Initial bound on the index change per smoothed Newton step, in units of `tau`.
const TRUST_TAUS: f64 = 10.0;

/// Line-search trials allowed once the objective no longer resolves the step.
const MAX_FLAT_TRIALS: usize = 4;

struct SolveCtx<'a> {
    loss: &'a LossModel,
    opts: &'a SolverOptions,
    box_r: Option<f64>,
    tau_scale: f64,
    n_total: f64,
}

#[derive(Debug, Clone)]
struct QSolution {
    beta: Vec<f64>,
    converged: bool,
    grad_norm: f64,
    objective: f64,
    iterations: usize,
}

fn check_cells(design: &DesignCache, basis: &Basis, opts: &SolverOptions) -> Result<()> {
    let required = opts.min_obs_per_cell.unwrap_or(3 * basis.local_size());
    for (cell, idx) in design.by_cell.iter().enumerate() {
        if idx.len() < required {
            return Err(Error::CellTooSparse {
                cell,
                count: idx.len(),
                required,
            });
        }
    }
    Ok(())
}

fn resolve_box(
    data: &Dataset,
    basis: &Basis,
    loss: &LossModel,
    q_grid: &[f64],
    opts: &SolverOptions,
    _design: &DesignCache,
) -> Result<Option<f64>> {
    match opts.box_radius {
        BoxRadius::Fixed(r) => Ok(Some(r)),
        BoxRadius::Off if !loss.convex_in_theta() => Err(Error::BoxRequired),
        BoxRadius::Auto if !loss.convex_in_theta() => {
            Ok(Some(auto_box_radius(data, basis, loss, q_grid)?))
        }
        _ => Ok(None),
    }
}

/// Interquartile range of the responses, or 1 when degenerate.
pub fn iqr(y: &[f64]) -> f64 {
    let mut s = y.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n < 2 {
        return 1.0;
    }
    let at = |p: f64| s[((p * n as f64).ceil() as usize).clamp(1, n) - 1];
    let r = at(0.75) - at(0.25);
    if r > 0.0 {
        r
    } else {
        let r = s[n - 1] - s[0];
        if r > 0.0 {
            r
        } else {
            1.0
        }
    }
}

/// Coefficients representing the constant function `theta`.
fn constant_coefficients(basis: &Basis, theta: f64) -> Vec<f64> {
    match basis.spec().kind {
        BasisKind::Bspline => vec![theta; basis.len()],
        BasisKind::PiecewisePoly => {
            let mut b = vec![0.0; basis.len()];
            for cell in 0..basis.partition().cell_count() {
                let first = basis.active(cell).expect("valid cell")[0];
                b[first] = theta;
            }
            b
        }
    }
}

fn initial_local(
    y: &[f64],
    loss: &LossModel,
    q: f64,
    box_r: Option<f64>,
    k_local: usize,
) -> Vec<f64> {
    let mut b = vec![0.0; k_local];
    b[0] = initial_index(y, loss, q, box_r);
    b
}

/// Index of the best constant fit to all responses.
fn initial_index(y: &[f64], loss: &LossModel, q: f64, box_r: Option<f64>) -> f64 {
    let bracket = box_r
        .map(|r| (-r, r))
        .or(Some(response_index_range(y, loss)));
    let (theta, _) = solve_scalar(y, loss, q, bracket);
    match box_r {
        Some(r) => theta.clamp(-r, r),
        None => theta,
    }
}

/// Index range spanned by the responses under the inverse link.
fn response_index_range(y: &[f64], loss: &LossModel) -> (f64, f64) {
    let (mut lo, mut hi) = y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    if matches!(loss.kind, LossKind::Distribution | LossKind::Logistic) {
        lo = 0.0;
        hi = 1.0;
    }
    let (rl, rh) = loss.link.range();
    let lo = lo.max(rl + 1e-6).min(rh - 1e-6);
    let hi = hi.min(rh - 1e-6).max(rl + 1e-6);
    let (a, b) = (loss.link.inverse(lo), loss.link.inverse(hi));
    let (a, b) = (a.min(b), a.max(b));
    let pad = 1.0 + 0.1 * (b - a).abs();
    (a - pad, b + pad)
}

fn mean_grad(y: &[f64], loss: &LossModel, q: f64, theta: f64) -> (f64, f64) {
    let (mut g, mut h) = (0.0, 0.0);
    for &v in y {
        let c = loss.composite(v, theta, q, None);
        g += c.grad;
        h += c.hess;
    }
    let n = y.len() as f64;
    (g / n, h / n)
}

fn mean_value(y: &[f64], loss: &LossModel, q: f64, theta: f64) -> f64 {
    y.iter()
        .map(|&v| loss.composite(v, theta, q, None).value)
        .sum::<f64>()
        / y.len() as f64
}

/// Scalar minimizer of `theta -> mean rho(y, eta(theta); q)`. Returns the index
/// and whether the solve met its tolerance.
pub fn solve_scalar(
    y: &[f64],
    loss: &LossModel,
    q: f64,
    bracket: Option<(f64, f64)>,
) -> (f64, bool) {
    let increasing = loss.link.deta(0.0) > 0.0;
    if matches!(loss.kind, LossKind::Quantile) && increasing {
        // Lower empirical quantile: the ceil(qN)-th order statistic.
        let mut s = y.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
        let v = s[rank - 1];
        let (lo, hi) = loss.link.range();
        if v > lo && v < hi {
            let theta = loss.link.inverse(v);
            return match bracket {
                Some((a, b)) if loss.link.is_identity() => {
                    (theta.clamp(a.min(theta), b.max(theta)), true)
                }
                _ => (theta, true),
            };
        }
    }
    if loss.convex_in_theta() && loss.smooth() {
        return scalar_root(y, loss, q);
    }
    scalar_search(
        y,
        loss,
        q,
        bracket.unwrap_or_else(|| response_index_range(y, loss)),
    )
}

/// Root of the monotone mean gradient by bracketing plus safeguarded Newton.
fn scalar_root(y: &[f64], loss: &LossModel, q: f64) -> (f64, bool) {
    let (a0, b0) = response_index_range(y, loss);
    let start = 0.5 * (a0 + b0);
    let (g0, _) = mean_grad(y, loss, q, start);
    if g0 == 0.0 {
        return (start, true);
    }
    let dir = if g0 > 0.0 { -1.0 } else { 1.0 };
    let mut step = 1.0f64.max(0.5 * (b0 - a0));
    let (mut lo, mut hi) = (start, start);
    let mut found = false;
    for _ in 0..80 {
        let t = start + dir * step;
        let (g, _) = mean_grad(y, loss, q, t);
        if g * g0 <= 0.0 {
            if dir > 0.0 {
                lo = start.max(t - step);
                hi = t;
            } else {
                lo = t;
                hi = start.min(t + step);
            }
            found = true;
            break;
        }
        step *= 2.0;
    }
    if !found {
        return (start + dir * step, false);
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (g, h) = mean_grad(y, loss, q, x);
        if g == 0.0 {
            return (x, true);
        }
        if g > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let newton = x - g / h;
        x = if h > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (hi - lo).abs() <= 1e-15 * (1.0 + x.abs()) || g.abs() < 1e-15 {
            return (x, true);
        }
    }
    (x, true)
}

/// Grid search plus golden-section refinement on a bracket, for non-convex or
/// non-smooth scalar objectives.
fn scalar_search(y: &[f64], loss: &LossModel, q: f64, (a, b): (f64, f64)) -> (f64, bool) {
    let m = 400usize;
    let step = (b - a) / m as f64;
    let (mut best, mut best_v) = (a, f64::INFINITY);
    for j in 0..=m {
        let t = a + step * j as f64;
        let v = mean_value(y, loss, q, t);
        if v < best_v {
            best = t;
            best_v = v;
        }
    }
    let (mut lo, mut hi) = ((best - step).max(a), (best + step).min(b));
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut c, mut d) = (hi - phi * (hi - lo), lo + phi * (hi - lo));
    let (mut fc, mut fd) = (mean_value(y, loss, q, c), mean_value(y, loss, q, d));
    for _ in 0..200 {
        if (hi - lo) <= 1e-13 * (1.0 + lo.abs()) {
            break;
        }
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - phi * (hi - lo);
            fc = mean_value(y, loss, q, c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + phi * (hi - lo);
            fd = mean_value(y, loss, q, d);
        }
    }
    let mut x = 0.5 * (lo + hi);
    if mean_value(y, loss, q, x) > best_v {
        x = best;
    }
    if loss.smooth() {
        x = refine_root(y, loss, q, x, step);
    }
    (x, true)
}

/// Polishes a golden-section estimate with safeguarded Newton steps on the
/// mean gradient, which resolves the minimizer beyond `sqrt(eps)`.
fn refine_root(y: &[f64], loss: &LossModel, q: f64, x0: f64, radius: f64) -> f64 {
    let (mut lo, mut hi) = (x0 - radius, x0 + radius);
    let (glo, _) = mean_grad(y, loss, q, lo);
    let (ghi, _) = mean_grad(y, loss, q, hi);
    if !(glo < 0.0 && ghi > 0.0) {
        return x0;
    }
    let mut x = x0;
    for _ in 0..100 {
        let (g, h) = mean_grad(y, loss, q, x);
        if g == 0.0 {
            return x;
        }
        if g > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let newton = x - g / h;
        x = if h > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= 1e-15 * (1.0 + x.abs()) {
            break;
        }
    }
    let base = mean_value(y, loss, q, x0);
    if mean_value(y, loss, q, x) <= base + 1e-15 * base.abs() {
        x
    } else {
        x0
    }
}

fn solve_by_cell(
    data: &Dataset,
    basis: &Basis,
    design: &DesignCache,
    q_grid: &[f64],
    ctx: &SolveCtx<'_>,
) -> Result<Vec<QSolution>> {
    let cells = basis.partition().cell_count();
    let k_local = basis.local_size();
    let per_cell: Vec<Vec<QSolution>> = (0..cells)
        .into_par_iter()
        .map(|cell| -> Result<Vec<QSolution>> {
            let active = basis.active(cell)?;
            let idx = &design.by_cell[cell];
            let y: Vec<f64> = idx.iter().map(|&i| data.y()[i]).collect();
            let rows: Vec<SparseVec> = idx
                .iter()
                .map(|&i| {
                    let r = &design.rows[i];
                    SparseVec {
                        indices: r
                            .indices
                            .iter()
                            .map(|g| active.binary_search(g).expect("active index"))
                            .collect(),
                        values: r.values.clone(),
                    }
                })
                .collect();
            let refs: Vec<&SparseVec> = rows.iter().collect();
            let prob = Problem::new(&refs, &y, k_local, k_local - 1, ctx.n_total);
            let mut beta = initial_local(&y, ctx.loss, q_grid[0], ctx.box_r, k_local);
            let mut out = Vec::with_capacity(q_grid.len());
            for &q in q_grid {
                let s = solve_cell(&prob, ctx, q, &beta, &y);
                beta.clone_from(&s.beta);
                out.push(s);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut result = Vec::with_capacity(q_grid.len());
    for (qi, _) in q_grid.iter().enumerate() {
        let mut beta = vec![0.0; basis.len()];
        let (mut conv, mut gn, mut obj, mut it) = (true, 0.0f64, 0.0, 0usize);
        for (cell, sols) in per_cell.iter().enumerate() {
            let s = &sols[qi];
            for (local, g) in basis.active(cell)?.into_iter().enumerate() {
                beta[g] = s.beta[local];
            }
            conv &= s.converged;
            gn = gn.max(s.grad_norm);
            obj += s.objective;
            it = it.max(s.iterations);
        }
        result.push(QSolution {
            beta,
            converged: conv,
            grad_norm: gn,
            objective: obj,
            iterations: it,
        });
    }
    Ok(result)
}

/// One cell: scalar shortcut for a single local function, block solve otherwise.
fn solve_cell(
    prob: &Problem<'_>,
    ctx: &SolveCtx<'_>,
    q: f64,
    init: &[f64],
    y: &[f64],
) -> QSolution {
    if prob.k == 1 && prob.rows.iter().all(|r| r.values[0] == 1.0) {
        let bracket = ctx.box_r.map(|r| (-r, r));
        let (mut theta, converged) = solve_scalar(
            y,
            ctx.loss,
            q,
            bracket.or(Some(response_index_range(y, ctx.loss))),
        );
        if let Some(r) = ctx.box_r {
            theta = theta.clamp(-r, r);
        }
        let beta = vec![theta];
        let (objective, grad) = prob.objective_and_grad(ctx.loss, q, &beta, None);
        let grad_norm = prob.scaled_norm(&grad, &beta, ctx.box_r);
        let nonsmooth = !ctx.loss.smooth();
        return QSolution {
            beta,
            converged: converged && (nonsmooth || grad_norm <= ctx.opts.grad_tol.max(1e-10)),
            grad_norm: if nonsmooth { 0.0 } else { grad_norm },
            objective,
            iterations: 1,
        };
    }
    solve_block(prob, ctx, q, init)
}

fn solve_block(prob: &Problem<'_>, ctx: &SolveCtx<'_>, q: f64, init: &[f64]) -> QSolution {
    let mut beta = init.to_vec();
    if let Some(r) = ctx.box_r {
        beta.iter_mut().for_each(|b| *b = b.clamp(-r, r));
    }
    if ctx.loss.smooth() {
        return newton(prob, ctx, q, beta, None, ctx.opts.grad_tol);
    }
    // Staged smoothing of the check loss.
    let scale = ctx.tau_scale;
    let mut tau = ctx.opts.smoothing_tau0.unwrap_or(0.1 * scale);
    let floor = ctx.opts.smoothing_floor * scale;
    let mut last;
    let mut total_iter = 0;
    loop {
        // Intermediate stages only need to land near the next stage's solution.
        let tol = if tau <= floor {
            ctx.opts.grad_tol
        } else {
            ctx.opts.grad_tol.max(STAGE_TOL)
        };
        last = newton(prob, ctx, q, beta, Some(tau), tol);
        total_iter += last.iterations;
        beta = last.beta.clone();
        if tau <= floor {
            break;
        }
        tau = (tau * ctx.opts.smoothing_decay).max(floor);
    }
    // Subgradient polishing on the exact check loss, keeping the best iterate.
    let (mut best_obj, mut g) = prob.objective_and_grad(ctx.loss, q, &beta, None);
    let mut best = beta.clone();
    let mut cur = beta;
    for t in 1..=ctx.opts.polish_steps {
        let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if gmax == 0.0 {
            break;
        }
        let step = tau / (t as f64).sqrt();
        for (b, gi) in cur.iter_mut().zip(&g) {
            *b -= step * gi / gmax;
        }
        if let Some(r) = ctx.box_r {
            cur.iter_mut().for_each(|b| *b = b.clamp(-r, r));
        }
        let (obj, next_g) = prob.objective_and_grad(ctx.loss, q, &cur, None);
        g = next_g;
        if obj < best_obj {
            best_obj = obj;
            best.clone_from(&cur);
        }
    }
    QSolution {
        beta: best,
        converged: last.converged,
        grad_norm: last.grad_norm,
        objective: best_obj,
        iterations: total_iter + ctx.opts.polish_steps,
    }
}

/// Rows of a (global or cell-local) least-squares-like problem.
struct Problem<'a> {
    rows: &'a [&'a SparseVec],
    y: &'a [f64],
    k: usize,
    bw: usize,
    n_total: f64,
    /// `E_n[p_k^2]`, used for scaling the Hessian regularization.
    gram_diag: Vec<f64>,
    /// `E_n[|p_k|]`, used for scaling gradients.
    abs_mean: Vec<f64>,
}

impl<'a> Problem<'a> {
    fn new(rows: &'a [&'a SparseVec], y: &'a [f64], k: usize, bw: usize, n_total: f64) -> Self {
        let mut gram_diag = vec![0.0; k];
        let mut abs_mean = vec![0.0; k];
        for r in rows {
            for (i, v) in r.iter() {
                gram_diag[i] += v * v / n_total;
                abs_mean[i] += v.abs() / n_total;
            }
        }
        Self {
            rows,
            y,
            k,
            bw,
            n_total,
            gram_diag,
            abs_mean,
        }
    }

    fn objective_and_grad(
        &self,
        loss: &LossModel,
        q: f64,
        beta: &[f64],
        tau: Option<f64>,
    ) -> (f64, Vec<f64>) {
        let mut obj = 0.0;
        let mut g = vec![0.0; self.k];
        for (r, &y) in self.rows.iter().zip(self.y) {
            let c = loss.composite(y, r.dot(beta), q, tau);
            obj += c.value;
            for (i, v) in r.iter() {
                g[i] += c.grad * v;
            }
        }
        g.iter_mut().for_each(|v| *v /= self.n_total);
        (obj / self.n_total, g)
    }

    fn objective(&self, loss: &LossModel, q: f64, beta: &[f64], tau: Option<f64>) -> f64 {
        self.rows
            .iter()
            .zip(self.y)
            .map(|(r, &y)| loss.composite(y, r.dot(beta), q, tau).value)
            .sum::<f64>()
            / self.n_total
    }

    fn hessian(&self, loss: &LossModel, q: f64, beta: &[f64], tau: Option<f64>) -> BandedMatrix {
        let mut h = BandedMatrix::zeros(self.k, self.bw);
        for (r, &y) in self.rows.iter().zip(self.y) {
            let c = loss.composite(y, r.dot(beta), q, tau);
            if c.hess > 0.0 {
                h.add_outer(&r.indices, &r.values, c.hess / self.n_total);
            }
        }
        h
    }

    /// Largest change of the index over the sample along `step`.
    fn reach(&self, step: &[f64]) -> f64 {
        self.rows
            .iter()
            .map(|r| r.dot(step).abs())
            .fold(0.0, f64::max)
    }

    /// Scaled sup-norm of the (projected) gradient.
    fn scaled_norm(&self, g: &[f64], beta: &[f64], box_r: Option<f64>) -> f64 {
        g.iter()
            .zip(beta)
            .zip(&self.abs_mean)
            .map(|((&gi, &b), &s)| {
                if let Some(r) = box_r {
                    if (b >= r && gi < 0.0) || (b <= -r && gi > 0.0) {
                        return 0.0;
                    }
                }
                if s > 0.0 {
                    gi.abs() / s
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max)
    }
}

fn newton(
    prob: &Problem<'_>,
    ctx: &SolveCtx<'_>,
    q: f64,
    mut beta: Vec<f64>,
    tau: Option<f64>,
    tol: f64,
) -> QSolution {
    let loss = ctx.loss;
    let project = |b: &mut Vec<f64>| {
        if let Some(r) = ctx.box_r {
            b.iter_mut().for_each(|v| *v = v.clamp(-r, r));
        }
    };
    let (mut obj, mut grad) = prob.objective_and_grad(loss, q, &beta, tau);
    let mut gnorm = prob.scaled_norm(&grad, &beta, ctx.box_r);
    let mut lambda = 1e-10;
    let mut trust = tau.map(|t| TRUST_TAUS * t);
    let mut iters = 0;
    let mut converged = gnorm <= tol;
    while !converged && iters < ctx.opts.max_iter {
        iters += 1;
        let h = prob.hessian(loss, q, &beta, tau);
        let mut accepted = false;
        for _attempt in 0..8 {
            let mut hr = h.clone();
            for k in 0..prob.k {
                let scale = prob.gram_diag[k].max(1e-300);
                let d = hr.diag(k).max(1e-10 * scale) + lambda * scale;
                hr.set(k, k, d);
            }
            let Ok(chol) = hr.cholesky() else {
                lambda *= 100.0;
                continue;
            };
            let mut step: Vec<f64> = grad.iter().map(|g| -g).collect();
            chol.solve_in_place(&mut step);
            if let Some(r) = ctx.box_r {
                // Freeze coordinates pinned at the box and pushed outward.
                for k in 0..prob.k {
                    if (beta[k] >= r && step[k] > 0.0) || (beta[k] <= -r && step[k] < 0.0) {
                        step[k] = 0.0;
                    }
                }
            }
            let mut t = 1.0;
            if let Some(radius) = trust {
                // Few residuals inside the smoothing band leave the curvature
                // nearly singular; bound the change of the index instead.
                let reach = prob.reach(&step);
                if reach > radius {
                    t = radius / reach;
                }
            }
            let t0 = t;
            let mut flat_trials = 0;
            for _ in 0..40 {
                let mut cand: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + t * s).collect();
                project(&mut cand);
                let c_obj = prob.objective(loss, q, &cand, tau);
                let flat = (c_obj - obj).abs() <= 1e-14 * (1.0 + obj.abs());
                if c_obj < obj
                    || (flat && {
                        let (_, cg) = prob.objective_and_grad(loss, q, &cand, tau);
                        prob.scaled_norm(&cg, &cand, ctx.box_r) < gnorm
                    })
                {
                    beta = cand;
                    accepted = true;
                    break;
                }
                // Below objective resolution, shorter steps stay flat.
                if flat {
                    flat_trials += 1;
                    if flat_trials == MAX_FLAT_TRIALS {
                        break;
                    }
                }
                t *= 0.5;
            }
            if accepted {
                lambda = (lambda * 0.1).max(1e-10);
                if let Some(radius) = trust.as_mut() {
                    if t == t0 && t < 1.0 {
                        *radius *= 4.0;
                    }
                }
                break;
            }
            lambda *= 100.0;
            if lambda > 1e8 {
                break;
            }
        }
        let (o, g) = prob.objective_and_grad(loss, q, &beta, tau);
        obj = o;
        grad = g;
        gnorm = prob.scaled_norm(&grad, &beta, ctx.box_r);
        converged = gnorm <= tol;
        if !accepted {
            break;
        }
    }
    let objective = prob.objective(loss, q, &beta, None);
    QSolution {
        beta,
        converged,
        grad_norm: gnorm,
        objective,
        iterations: iters,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSpec;
    use crate::loss::Link;
    use crate::partition::{Domain, KnotRule, Partition};
    use approx::assert_abs_diff_eq;

    fn pc_basis(cells: usize) -> Basis {
        let p = Partition::build(Domain::unit(1).unwrap(), &[cells], KnotRule::Uniform).unwrap();
        Basis::build(p, BasisSpec::new(BasisKind::PiecewisePoly, 1)).unwrap()
    }

    fn one_cell_rows(n: usize) -> Vec<SparseVec> {
        (0..n)
            .map(|_| SparseVec {
                indices: vec![0],
                values: vec![1.0],
            })
            .collect()
    }

    #[test]
    fn quantile_cell_is_order_statistic() {
        let loss = LossModel::quantile(Link::Identity, 0.05).unwrap();
        let opts = SolverOptions {
            min_obs_per_cell: Some(1),
            ..Default::default()
        };
        let y = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(
            fit_per_cell(&one_cell_rows(5), &y, 1, &loss, 0.5, &opts, None).unwrap(),
            vec![3.0]
        );
        let y = [8.0, 2.0, 6.0, 4.0];
        assert_eq!(
            fit_per_cell(&one_cell_rows(4), &y, 1, &loss, 0.25, &opts, None).unwrap(),
            vec![2.0]
        );
    }

    #[test]
    fn logistic_cell_is_logit_of_mean() {
        let loss = LossModel::logistic();
        let opts = SolverOptions {
            min_obs_per_cell: Some(1),
            ..Default::default()
        };
        let y = [1.0, 1.0, 0.0, 1.0];
        let b = fit_per_cell(&one_cell_rows(4), &y, 1, &loss, 0.0, &opts, None).unwrap();
        assert_abs_diff_eq!(b[0], 3f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn distribution_cloglog_cell() {
        let loss = LossModel::distribution(Link::Cloglog, 1.0).unwrap();
        let opts = SolverOptions {
            min_obs_per_cell: Some(1),
            ..Default::default()
        };
        let y = [-1.0, 0.5, -0.2, 0.9];
        let b = fit_per_cell(&one_cell_rows(4), &y, 1, &loss, 0.0, &opts, None).unwrap();
        assert_abs_diff_eq!(b[0], (2f64.ln()).ln(), epsilon = 1e-10);
    }

    #[test]
    fn single_observation_interpolates() {
        let loss = LossModel::lp(2.0, Link::Identity).unwrap();
        let opts = SolverOptions {
            min_obs_per_cell: Some(1),
            ..Default::default()
        };
        let b = fit_per_cell(&one_cell_rows(1), &[0.7], 1, &loss, 0.0, &opts, None).unwrap();
        assert_abs_diff_eq!(b[0], 0.7, epsilon = 1e-12);
        let err = fit_per_cell(
            &one_cell_rows(2),
            &[0.7, 0.1],
            1,
            &loss,
            0.0,
            &SolverOptions::default(),
            None,
        );
        assert!(matches!(err, Err(Error::CellTooSparse { .. })));
    }

    #[test]
    fn sparse_cell_is_named() {
        let basis = pc_basis(4);
        let x: Vec<f64> = (0..20)
            .map(|i| 0.5 * i as f64 / 20.0)
            .chain([0.6, 0.9])
            .collect();
        let y = vec![0.0; x.len()];
        let data = Dataset::new(1, x, y).unwrap();
        let loss = LossModel::lp(2.0, Link::Identity).unwrap();
        let err = fit(&data, &basis, &loss, &[0.0], &SolverOptions::default()).unwrap_err();
        assert_eq!(
            err,
            Error::CellTooSparse {
                cell: 2,
                count: 1,
                required: 3
            }
        );
    }

    #[test]
    fn constant_response_box_radius() {
        let basis = pc_basis(2);
        let data =
            Dataset::new(1, (0..10).map(|i| i as f64 / 9.0).collect(), vec![-3.0; 10]).unwrap();
        let loss = LossModel::tukey(Link::Identity, 1.0, 2.0).unwrap();
        assert_abs_diff_eq!(
            auto_box_radius(&data, &basis, &loss, &[1.0]).unwrap(),
            6.0,
            epsilon = 1e-9
        );
        let small = data.map_y(|_| 0.2);
        assert_eq!(auto_box_radius(&small, &basis, &loss, &[1.0]).unwrap(), 1.0);
        assert!(auto_box_radius(&data, &basis, &loss, &[]).is_err());
    }

    #[test]
    fn box_required_without_auto() {
        let basis = pc_basis(2);
        let data =
            Dataset::new(1, (0..10).map(|i| i as f64 / 9.0).collect(), vec![0.0; 10]).unwrap();
        let loss = LossModel::tukey(Link::Identity, 1.0, 2.0).unwrap();
        let opts = SolverOptions {
            box_radius: BoxRadius::Off,
            ..Default::default()
        };
        assert_eq!(
            fit(&data, &basis, &loss, &[1.0], &opts).unwrap_err(),
            Error::BoxRequired
        );
    }

    #[test]
    fn iqr_of_simple_sample() {
        assert_eq!(iqr(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]), 4.0);
        assert_eq!(iqr(&[2.0, 2.0]), 1.0);
    }
}

//! Sandwich variance objects: the Hessian-type matrix `Q_hat(q)`, the score
//! covariance `Sigma_hat(q, q')`, the pointwise variance `Omega_hat(x, q)` and
//! the linear (Bahadur) term of the estimator.
//!
//! All matrices share the sparsity of the basis Gram matrix and are stored as
//! [`BandedMatrix`]; `Q_hat(q)^{-1}` is never formed except for diagnostics.

use rayon::prelude::*;

use crate::banded::{BandedCholesky, BandedMatrix};
use crate::basis::{Basis, SparseVec};
use crate::error::{Error, Result};
use crate::loss::{LossKind, LossModel, PlugInContext};
use crate::solver::{fit_unchecked, Dataset, FitResult};

/// Fitted indices `mu_hat(x_i, q)` for a set of `q` values.
#[derive(Debug, Clone, Default)]
pub struct IndexTable {
    y: Vec<f64>,
    q: Vec<f64>,
    theta: Vec<Vec<f64>>,
}

impl IndexTable {
    pub fn new(y: Vec<f64>) -> Self {
        Self {
            y,
            ..Default::default()
        }
    }

    pub fn insert(&mut self, q: f64, theta: Vec<f64>) {
        debug_assert_eq!(theta.len(), self.y.len());
        match self.position(q) {
            Some(j) => self.theta[j] = theta,
            None => {
                self.q.push(q);
                self.theta.push(theta);
            }
        }
    }

    pub fn contains(&self, q: f64) -> bool {
        self.position(q).is_some()
    }

    pub fn column(&self, q: f64) -> Option<&[f64]> {
        self.position(q).map(|j| self.theta[j].as_slice())
    }

    fn position(&self, q: f64) -> Option<usize> {
        self.q
            .iter()
            .position(|&g| (g - q).abs() <= 1e-12 * (1.0 + q.abs()))
    }

    /// Adds every grid column of a fit.
    pub fn add_fit(&mut self, fit: &FitResult) -> Result<()> {
        let design = fit.design_or_err()?;
        for (qi, &q) in fit.q_grid.iter().enumerate() {
            let beta = &fit.beta[qi];
            self.insert(q, design.rows.iter().map(|r| r.dot(beta)).collect());
        }
        Ok(())
    }
}

impl PlugInContext for IndexTable {
    fn n(&self) -> usize {
        self.y.len()
    }

    fn response(&self, i: usize) -> f64 {
        self.y[i]
    }

    fn index(&self, i: usize, q: f64) -> Option<f64> {
        self.position(q).map(|j| self.theta[j][i])
    }
}

/// `Q_hat`, its factorization and plug-in weights for every grid point of a fit.
#[derive(Debug)]
pub struct SandwichSet<'a> {
    fit: &'a FitResult,
    table: IndexTable,
    /// `Psi_hat_1(x_i, q)` per grid point and observation.
    psi1: Vec<Vec<f64>>,
    qhat: Vec<BandedMatrix>,
    chol: Vec<BandedCholesky>,
    ridge: Vec<f64>,
    lambda_min: Vec<f64>,
    sigma_diag: Vec<BandedMatrix>,
}

impl<'a> SandwichSet<'a> {
    /// Builds the plug-in objects for every point of the fit grid. Quantile
    /// fits additionally refit at the density brackets `q +- c n^{-1/5}`.
    pub fn build(fit: &'a FitResult, data: &Dataset) -> Result<Self> {
        let design = fit.design_or_err()?;
        if design.rows.len() != data.n() {
            return Err(Error::InvalidInput(format!(
                "fit was computed on {} observations, data has {}",
                design.rows.len(),
                data.n()
            )));
        }
        let mut table = IndexTable::new(data.y().to_vec());
        table.add_fit(fit)?;
        if fit.loss.kind == LossKind::Quantile {
            let mut aux: Vec<f64> = fit
                .q_grid
                .iter()
                .flat_map(|&q| {
                    let (lo, hi) = fit
                        .loss
                        .density_bracket(q, data.n())
                        .expect("quantile bracket");
                    [lo, hi]
                })
                .filter(|&q| !table.contains(q))
                .collect();
            aux.sort_by(f64::total_cmp);
            aux.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
            if !aux.is_empty() {
                let aux_fit = fit_unchecked(data, &fit.basis, &fit.loss, &aux, &fit.options)?;
                table.add_fit(&aux_fit)?;
            }
        }

        let k = fit.basis.len();
        let bw = fit.basis.bandwidth();
        let n = data.n() as f64;
        let link = &fit.loss.link;
        let per_q: Vec<_> = fit
            .q_grid
            .par_iter()
            .map(|&q| -> Result<_> {
                let theta = table.column(q).expect("grid column");
                let psi1: Vec<f64> = (0..data.n())
                    .map(|i| fit.loss.psi1_hat(&table, i, q))
                    .collect::<Result<_>>()?;
                let mut qm = BandedMatrix::zeros(k, bw);
                for (i, r) in design.rows.iter().enumerate() {
                    let d = link.deta(theta[i]);
                    qm.add_outer(&r.indices, &r.values, psi1[i] * d * d / n);
                }
                let ridge = 1e-10 * qm.trace() / k as f64;
                qm.add_diagonal(ridge);
                let chol = qm.cholesky().map_err(|e| Error::SingularQ {
                    q,
                    min_pivot: e.pivot,
                })?;
                let lambda_min = smallest_eigenvalue(&qm, &chol);
                if !(lambda_min >= 1e-12) {
                    return Err(Error::SingularQ {
                        q,
                        min_pivot: lambda_min,
                    });
                }
                Ok((psi1, qm, chol, ridge, lambda_min))
            })
            .collect::<Result<_>>()?;

        let g = fit.q_grid.len();
        let mut set = Self {
            fit,
            table,
            psi1: Vec::with_capacity(g),
            qhat: Vec::with_capacity(g),
            chol: Vec::with_capacity(g),
            ridge: Vec::with_capacity(g),
            lambda_min: Vec::with_capacity(g),
            sigma_diag: Vec::with_capacity(g),
        };
        for (psi1, qm, chol, ridge, lmin) in per_q {
            set.psi1.push(psi1);
            set.qhat.push(qm);
            set.chol.push(chol);
            set.ridge.push(ridge);
            set.lambda_min.push(lmin);
        }
        set.sigma_diag = (0..g)
            .into_par_iter()
            .map(|qi| set.sigma_hat(qi, qi))
            .collect::<Result<_>>()?;
        Ok(set)
    }

    pub fn fit(&self) -> &'a FitResult {
        self.fit
    }

    pub fn table(&self) -> &IndexTable {
        &self.table
    }

    pub fn q_hat(&self, qi: usize) -> &BandedMatrix {
        &self.qhat[qi]
    }

    pub fn cholesky(&self, qi: usize) -> &BandedCholesky {
        &self.chol[qi]
    }

    /// Diagonal ridge added to `Q_hat(q)` before factorization.
    pub fn ridge(&self, qi: usize) -> f64 {
        self.ridge[qi]
    }

    pub fn lambda_min(&self, qi: usize) -> f64 {
        self.lambda_min[qi]
    }

    pub fn psi1(&self, qi: usize) -> &[f64] {
        &self.psi1[qi]
    }

    pub fn sigma_diag(&self, qi: usize) -> &BandedMatrix {
        &self.sigma_diag[qi]
    }

    /// `Sigma_hat(q_i, q_j) = E_n[S_hat(x_i) eta'(mu_hat(q)) eta'(mu_hat(q')) p p']`.
    pub fn sigma_hat(&self, qi: usize, qj: usize) -> Result<BandedMatrix> {
        let design = self.fit.design_or_err()?;
        let (q1, q2) = (self.fit.q_grid[qi], self.fit.q_grid[qj]);
        let t1 = self.table.column(q1).expect("grid column");
        let t2 = self.table.column(q2).expect("grid column");
        let link = &self.fit.loss.link;
        let n = design.rows.len() as f64;
        let mut s = BandedMatrix::zeros(self.fit.basis.len(), self.fit.basis.bandwidth());
        for (i, r) in design.rows.iter().enumerate() {
            let w =
                self.fit.loss.s_hat(&self.table, i, q1, q2)? * link.deta(t1[i]) * link.deta(t2[i]);
            s.add_outer(&r.indices, &r.values, w / n);
        }
        Ok(s)
    }

    /// `Q_hat(q)^{-1} p^(v)(x)` and `Omega_hat(x, q)`.
    pub fn solve_point(&self, x: &[f64], v: &[usize], qi: usize) -> Result<(Vec<f64>, f64)> {
        let p = self.fit.basis.eval(x, v)?;
        let w = self.chol[qi].solve(&p.to_dense(self.fit.basis.len()));
        let omega = self.sigma_diag[qi].bilinear(&w, &w);
        if !(omega > 0.0) {
            return Err(Error::DegenerateVariance {
                q: self.fit.q_grid[qi],
                omega,
            });
        }
        Ok((w, omega))
    }

    /// `Omega_hat(x, q) = p' Q^{-1} Sigma(q, q) Q^{-1} p`.
    pub fn omega(&self, x: &[f64], v: &[usize], qi: usize) -> Result<f64> {
        Ok(self.solve_point(x, v, qi)?.1)
    }

    /// Studentized loading `ell_hat(x, q) = Q^{-1} p / sqrt(Omega_hat)` and `Omega_hat`.
    pub fn ell(&self, x: &[f64], v: &[usize], qi: usize) -> Result<(Vec<f64>, f64)> {
        let (mut w, omega) = self.solve_point(x, v, qi)?;
        let s = omega.sqrt();
        w.iter_mut().for_each(|e| *e /= s);
        Ok((w, omega))
    }

    /// Linear term `L^(v)(x, q)` with fitted indices and plug-in `Psi_hat_1`.
    pub fn bahadur_linearization(
        &self,
        data: &Dataset,
        points: &[Vec<f64>],
        v: &[usize],
        qi: usize,
    ) -> Result<Vec<f64>> {
        let q = self.fit.q_grid[qi];
        let theta = self.table.column(q).expect("grid column");
        linear_term(
            &self.fit.basis,
            &self.fit.design_or_err()?.rows,
            data.y(),
            &self.fit.loss,
            theta,
            &self.psi1[qi],
            q,
            points,
            v,
        )
    }

    /// Largest `|[Q_hat^{-1}]_{jk}|` for each Chebyshev distance between the
    /// tensor indices of `j` and `k`.
    pub fn banded_decay_report(&self, qi: usize) -> Vec<f64> {
        let inv = self.chol[qi].inverse_dense();
        let basis = &self.fit.basis;
        let idx: Vec<Vec<usize>> = (0..basis.len())
            .map(|k| basis.coef_multi_index(k))
            .collect();
        decay_by_distance(&inv, |a, b| {
            idx[a]
                .iter()
                .zip(&idx[b])
                .map(|(&u, &w)| u.abs_diff(w))
                .max()
                .unwrap_or(0)
        })
    }

    /// Smallest and largest eigenvalue of `Q_hat(q)`.
    pub fn eigen_range(&self, qi: usize) -> (f64, f64) {
        let ev = self.qhat[qi].eigenvalues();
        (ev[0], ev[ev.len() - 1])
    }
}

/// Maximum absolute entry of a dense matrix for every value of `dist(j, k)`.
pub fn decay_by_distance(m: &[Vec<f64>], dist: impl Fn(usize, usize) -> usize) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for (j, row) in m.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            let d = dist(j, k);
            if out.len() <= d {
                out.resize(d + 1, 0.0);
            }
            out[d] = out[d].max(v.abs());
        }
    }
    out
}

/// `L^(v)(x, q) = -p^(v)(x)' Qbar^{-1} E_n[p eta'(theta_i) psi(y_i, eta(theta_i); q)]`
/// with `Qbar = E_n[p p' psi1_i eta'(theta_i)^2]`.
///
/// `theta` are the indices at which scores are evaluated (fitted or true) and
/// `psi1` the matching values of `Psi_1`.
#[allow(clippy::too_many_arguments)]
pub fn linear_term(
    basis: &Basis,
    rows: &[SparseVec],
    y: &[f64],
    loss: &LossModel,
    theta: &[f64],
    psi1: &[f64],
    q: f64,
    points: &[Vec<f64>],
    v: &[usize],
) -> Result<Vec<f64>> {
    let k = basis.len();
    let n = rows.len() as f64;
    let link = &loss.link;
    let mut qbar = BandedMatrix::zeros(k, basis.bandwidth());
    let mut score = vec![0.0; k];
    for (i, r) in rows.iter().enumerate() {
        let d = link.deta(theta[i]);
        qbar.add_outer(&r.indices, &r.values, psi1[i] * d * d / n);
        let s = d * loss.psi(y[i], link.clamp_to_range(link.eta(theta[i])), q) / n;
        for (j, val) in r.iter() {
            score[j] += val * s;
        }
    }
    let chol = qbar.cholesky().map_err(|e| Error::SingularQ {
        q,
        min_pivot: e.pivot,
    })?;
    chol.solve_in_place(&mut score);
    points
        .iter()
        .map(|x| Ok(-basis.eval(x, v)?.dot(&score)))
        .collect()
}

/// Inverse iteration with the existing factorization, finished by a Rayleigh quotient.
fn smallest_eigenvalue(m: &BandedMatrix, chol: &BandedCholesky) -> f64 {
    let k = m.n();
    let mut x: Vec<f64> = (0..k)
        .map(|i| 1.0 + 0.1 * ((i * 7919) % 13) as f64)
        .collect();
    for _ in 0..60 {
        let y = chol.solve(&x);
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return 0.0;
        }
        x = y.into_iter().map(|v| v / norm).collect();
    }
    m.bilinear(&x, &x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{BasisKind, BasisSpec};
    use crate::loss::Link;
    use crate::partition::{Domain, KnotRule, Partition};
    use crate::solver::{fit, SolverOptions};
    use approx::assert_abs_diff_eq;

    fn pc(cells: usize, m: usize) -> Basis {
        let p = Partition::build(Domain::unit(1).unwrap(), &[cells], KnotRule::Uniform).unwrap();
        Basis::build(p, BasisSpec::new(BasisKind::PiecewisePoly, m)).unwrap()
    }

    fn grid_data(n: usize, y: impl Fn(usize) -> f64) -> Dataset {
        Dataset::new(
            1,
            (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect(),
            (0..n).map(y).collect(),
        )
        .unwrap()
    }

    #[test]
    fn logistic_single_cell_scalars() {
        let data = grid_data(8, |i| (i % 2) as f64);
        let f = fit(
            &data,
            &pc(1, 1),
            &LossModel::logistic(),
            &[0.0],
            &SolverOptions::default(),
        )
        .unwrap();
        let s = SandwichSet::build(&f, &data).unwrap();
        let ridge = s.ridge(0);
        assert_abs_diff_eq!(s.q_hat(0).get(0, 0), 0.25 + ridge, epsilon = 1e-14);
        assert_abs_diff_eq!(s.sigma_diag(0).get(0, 0), 0.25, epsilon = 1e-14);
        let omega = s.omega(&[0.3], &[0], 0).unwrap();
        assert_abs_diff_eq!(omega, 0.25 / (0.25 + ridge).powi(2), epsilon = 1e-12);
        assert!(matches!(
            s.omega(&[0.3], &[1], 0),
            Err(Error::DerivativeOrderTooHigh { .. })
        ));
    }

    #[test]
    fn quantile_constant_basis_closed_form() {
        let data = grid_data(400, |i| {
            ((i * 37) % 101) as f64 / 101.0 + (i as f64 / 400.0)
        });
        let f = fit(
            &data,
            &pc(4, 1),
            &LossModel::quantile(Link::Identity, 0.05).unwrap(),
            &[0.3, 0.5],
            &SolverOptions::default(),
        )
        .unwrap();
        let s = SandwichSet::build(&f, &data).unwrap();
        assert_eq!(s.q_hat(0).bandwidth(), 0);
        for (qi, &q) in [0.3, 0.5].iter().enumerate() {
            for cell in 0..4 {
                let x = [(cell as f64 + 0.5) / 4.0];
                let i = (0..data.n())
                    .find(|&i| f.design().unwrap().cells[i] == cell)
                    .unwrap();
                let fhat = s.psi1(qi)[i];
                let w = 0.25;
                let closed = q * (1.0 - q) * w / (w * fhat + s.ridge(qi)).powi(2);
                let generic = s.omega(&x, &[0], qi).unwrap();
                assert!((generic - closed).abs() <= 1e-10 * closed);
                assert_abs_diff_eq!(
                    s.sigma_diag(qi).get(cell, cell),
                    q * (1.0 - q) * w,
                    epsilon = 1e-15
                );
            }
        }
    }

    #[test]
    fn zero_scores_give_zero_linear_term() {
        let basis = pc(2, 1);
        let data = grid_data(10, |_| 1.0);
        let design = crate::solver::DesignCache::build(&data, &basis).unwrap();
        let loss = LossModel::lp(2.0, Link::Identity).unwrap();
        let l = linear_term(
            &basis,
            &design.rows,
            data.y(),
            &loss,
            &[1.0; 10],
            &[2.0; 10],
            0.0,
            &[vec![0.2], vec![0.8]],
            &[0],
        )
        .unwrap();
        assert_eq!(l, vec![0.0, 0.0]);
    }

    #[test]
    fn decay_of_tridiagonal_inverse() {
        let k = 20;
        let mut m = BandedMatrix::<f64>::zeros(k, 1);
        for i in 0..k {
            m.set(i, i, 4.0);
            if i > 0 {
                m.set(i, i - 1, 1.0);
            }
        }
        let inv = m.cholesky().unwrap().inverse_dense();
        // Centre row of the inverse of tridiag(1, 4, 1) decays like (2 - sqrt 3)^|j - k|.
        let c = k / 2;
        for d in 1..6 {
            let ratio = inv[c][c + d].abs() / inv[c][c + d - 1].abs();
            assert_abs_diff_eq!(ratio, 2.0 - 3f64.sqrt(), epsilon = 1e-6);
        }
        let prof = decay_by_distance(&inv, |a, b| a.abs_diff(b));
        assert!(prof.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn diagonal_q_has_flat_decay() {
        let data = grid_data(60, |i| (i % 3) as f64);
        let f = fit(
            &data,
            &pc(3, 1),
            &LossModel::lp(2.0, Link::Identity).unwrap(),
            &[0.0],
            &SolverOptions::default(),
        )
        .unwrap();
        let s = SandwichSet::build(&f, &data).unwrap();
        let prof = s.banded_decay_report(0);
        assert!(prof[0] > 0.0);
        assert!(prof[1..].iter().all(|&v| v == 0.0));
    }
}

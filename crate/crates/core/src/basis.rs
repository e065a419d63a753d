//! Locally supported bases on a tensor partition.
//!
//! Both kinds are tensor products of one-dimensional bases:
//!
//! * `PiecewisePoly` ("unconnected"): on every interval, `m` orthonormal
//!   shifted Legendre polynomials `sqrt(2r+1) P_r`. Each function lives on one cell.
//! * `BSpline` ("connected"): B-splines of order `m` on the partition knots with
//!   `m`-fold boundary knots. Supports span `m` consecutive intervals.
//!
//! Global indices use the first coordinate as the fastest-varying one, so the
//! functions active on a cell always come out in increasing index order.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::Partition;
use crate::scalar::Scalar;

/// Largest supported order (polynomial degree `MAX_ORDER - 1`).
pub const MAX_ORDER: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    PiecewisePoly,
    #[serde(alias = "b_spline")]
    Bspline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    /// Order `m`: piecewise degree `m - 1`.
    pub order: usize,
    /// Highest total derivative order the basis will be evaluated at.
    pub deriv_cap: usize,
}

impl BasisSpec {
    /// Spec with the derivative cap at its maximum, `m - 1`.
    pub fn new(kind: BasisKind, order: usize) -> Self {
        Self {
            kind,
            order,
            deriv_cap: order.saturating_sub(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.order == 0 || self.order > MAX_ORDER {
            return Err(Error::UnsupportedOrder {
                order: self.order,
                max: MAX_ORDER,
            });
        }
        if self.deriv_cap >= self.order {
            return Err(Error::DerivativeOrderTooHigh {
                requested: self.deriv_cap,
                cap: self.order - 1,
            });
        }
        Ok(())
    }
}

/// Sparse basis evaluation: the nonzero entries of `p^(v)(x)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SparseVec<T: Scalar = f64> {
    pub indices: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Scalar> SparseVec<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn clear(&mut self) {
        self.indices.clear();
        self.values.clear();
    }

    pub fn dot(&self, dense: &[T]) -> T {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&k, &v)| v * dense[k])
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, T)> + '_ {
        self.indices
            .iter()
            .copied()
            .zip(self.values.iter().copied())
    }

    pub fn to_dense(&self, k: usize) -> Vec<T> {
        let mut out = vec![T::zero(); k];
        for (i, v) in self.iter() {
            out[i] = v;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Basis<T: Scalar = f64> {
    spec: BasisSpec,
    partition: Partition<T>,
    /// Number of one-dimensional functions per coordinate.
    counts: Vec<usize>,
    strides: Vec<usize>,
    k: usize,
    /// Extended knot vectors (B-splines only).
    ext_knots: Vec<Vec<T>>,
}

impl<T: Scalar> Basis<T> {
    pub fn build(partition: Partition<T>, spec: BasisSpec) -> Result<Self> {
        spec.validate()?;
        let m = spec.order;
        let counts: Vec<usize> = partition
            .cells_per_dim()
            .iter()
            .map(|&j| match spec.kind {
                BasisKind::PiecewisePoly => j * m,
                BasisKind::Bspline => j + m - 1,
            })
            .collect();
        let mut strides = Vec::with_capacity(counts.len());
        let mut k = 1usize;
        for &c in &counts {
            strides.push(k);
            k *= c;
        }
        let ext_knots = match spec.kind {
            BasisKind::PiecewisePoly => Vec::new(),
            BasisKind::Bspline => partition
                .knots()
                .iter()
                .map(|kn| {
                    let mut e = vec![kn[0]; m - 1];
                    e.extend_from_slice(kn);
                    e.extend(std::iter::repeat_n(kn[kn.len() - 1], m - 1));
                    e
                })
                .collect(),
        };
        Ok(Self {
            spec,
            partition,
            counts,
            strides,
            k,
            ext_knots,
        })
    }

    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn partition(&self) -> &Partition<T> {
        &self.partition
    }

    pub fn dim(&self) -> usize {
        self.partition.dim()
    }

    /// Number of basis functions `K`.
    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn order(&self) -> usize {
        self.spec.order
    }

    /// Whether every function is supported on a single cell.
    pub fn is_unconnected(&self) -> bool {
        self.spec.kind == BasisKind::PiecewisePoly || self.spec.order == 1
    }

    /// Number of functions active on any one cell, `m^d`.
    pub fn local_size(&self) -> usize {
        self.spec.order.pow(self.dim() as u32)
    }

    /// Largest index distance between two functions sharing a cell.
    pub fn bandwidth(&self) -> usize {
        self.strides
            .iter()
            .map(|&s| (self.spec.order - 1) * s)
            .sum()
    }

    /// Per-coordinate indices of function `k` in the tensor product.
    pub fn coef_multi_index(&self, k: usize) -> Vec<usize> {
        self.strides
            .iter()
            .zip(&self.counts)
            .map(|(&s, &c)| (k / s) % c)
            .collect()
    }

    /// First one-dimensional function index active on interval `i` of coordinate `j`.
    #[inline]
    fn first_1d(&self, i: usize) -> usize {
        match self.spec.kind {
            BasisKind::PiecewisePoly => i * self.spec.order,
            BasisKind::Bspline => i,
        }
    }

    /// Indices of the functions active on a cell, increasing.
    pub fn active(&self, cell: usize) -> Result<Vec<usize>> {
        let idx = self.partition.cell_multi_index(cell)?;
        let m = self.spec.order;
        let d = self.dim();
        let base: usize = idx
            .iter()
            .zip(&self.strides)
            .map(|(&i, &s)| self.first_1d(i) * s)
            .sum();
        Ok((0..self.local_size())
            .map(|c| {
                let mut off = 0;
                let mut rem = c;
                for j in 0..d {
                    off += (rem % m) * self.strides[j];
                    rem /= m;
                }
                base + off
            })
            .collect())
    }

    /// Cells on which function `k` is active.
    pub fn support(&self, k: usize) -> Result<Vec<usize>> {
        if k >= self.k {
            return Err(Error::InvalidInput(format!(
                "basis index {k} out of range {}",
                self.k
            )));
        }
        let m = self.spec.order;
        let cells = self.partition.cells_per_dim();
        let ranges: Vec<(usize, usize)> = (0..self.dim())
            .map(|j| {
                let i1 = (k / self.strides[j]) % self.counts[j];
                match self.spec.kind {
                    BasisKind::PiecewisePoly => (i1 / m, i1 / m),
                    BasisKind::Bspline => (i1.saturating_sub(m - 1), i1.min(cells[j] - 1)),
                }
            })
            .collect();
        let mut out = Vec::new();
        let mut cur: Vec<usize> = ranges.iter().map(|r| r.0).collect();
        loop {
            out.push(self.partition.cell_from_multi_index(&cur));
            let mut j = 0;
            loop {
                if j == cur.len() {
                    out.sort_unstable();
                    return Ok(out);
                }
                if cur[j] < ranges[j].1 {
                    cur[j] += 1;
                    break;
                }
                cur[j] = ranges[j].0;
                j += 1;
            }
        }
    }

    pub fn check_v(&self, v: &[usize]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::InvalidInput(format!(
                "derivative multi-index has length {}, expected {}",
                v.len(),
                self.dim()
            )));
        }
        let total: usize = v.iter().sum();
        if total > self.spec.deriv_cap {
            return Err(Error::DerivativeOrderTooHigh {
                requested: total,
                cap: self.spec.deriv_cap,
            });
        }
        Ok(())
    }

    /// Evaluates `p^(v)(x)` sparsely.
    pub fn eval(&self, x: &[T], v: &[usize]) -> Result<SparseVec<T>> {
        let mut out = SparseVec::default();
        self.eval_into(x, v, &mut out)?;
        Ok(out)
    }

    /// Like [`Basis::eval`] but reuses the caller's buffers. Returns the cell of `x`.
    pub fn eval_into(&self, x: &[T], v: &[usize], out: &mut SparseVec<T>) -> Result<usize> {
        self.check_v(v)?;
        let cell = self.partition.locate(x)?;
        let m = self.spec.order;
        let d = self.dim();
        let mut local = [[T::zero(); MAX_ORDER]; 8];
        let mut firsts = [0usize; 8];
        if d > local.len() {
            return Err(Error::InvalidInput(format!(
                "dimension {d} exceeds the supported maximum 8"
            )));
        }
        for j in 0..d {
            let i = self.partition.locate_dim(j, x[j]);
            firsts[j] = self.first_1d(i);
            self.eval_1d(j, i, x[j], v[j], &mut local[j]);
        }
        out.clear();
        for c in 0..self.local_size() {
            let mut rem = c;
            let mut idx = 0;
            let mut val = T::one();
            for j in 0..d {
                let r = rem % m;
                rem /= m;
                idx += (firsts[j] + r) * self.strides[j];
                val *= local[j][r];
            }
            out.indices.push(idx);
            out.values.push(val);
        }
        Ok(cell)
    }

    /// Values of the `m` one-dimensional functions active on interval `i` of coordinate `j`.
    fn eval_1d(&self, j: usize, i: usize, x: T, v: usize, out: &mut [T; MAX_ORDER]) {
        let m = self.spec.order;
        match self.spec.kind {
            BasisKind::PiecewisePoly => {
                let kn = &self.partition.knots()[j];
                let (a, b) = (kn[i], kn[i + 1]);
                let two = T::lit(2.0);
                let t = two * (x - a) / (b - a) - T::one();
                let scale = (two / (b - a)).powi(v as i32);
                for (r, o) in out.iter_mut().enumerate().take(m) {
                    *o = scale * legendre_deriv(r, v, t);
                }
            }
            BasisKind::Bspline => bspline_local(&self.ext_knots[j], m, i + m - 1, x, v, out),
        }
    }
}

/// Monomial coefficients of the Legendre polynomials `P_r(t)`, r < 5.
const LEGENDRE: [[f64; MAX_ORDER]; MAX_ORDER] = [
    [1.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0, 0.0],
    [-0.5, 0.0, 1.5, 0.0, 0.0],
    [0.0, -1.5, 0.0, 2.5, 0.0],
    [0.375, 0.0, -3.75, 0.0, 4.375],
];

fn legendre_deriv<T: Scalar>(r: usize, v: usize, t: T) -> T {
    let norm = T::lit(((2 * r + 1) as f64).sqrt());
    // Horner on the v-th derivative of the monomial expansion.
    let mut acc = T::zero();
    for p in (v..=r).rev() {
        let falling: f64 = (0..v).map(|s| (p - s) as f64).product();
        acc = acc * t + T::lit(LEGENDRE[r][p] * falling);
    }
    norm * acc
}

/// `out[r] = D^v B_{mu-m+1+r, m}(x)` for the `m` B-splines nonzero on `[t_mu, t_mu+1)`.
fn bspline_local<T: Scalar>(
    t: &[T],
    m: usize,
    mu: usize,
    x: T,
    v: usize,
    out: &mut [T; MAX_ORDER],
) {
    let mut b = [T::zero(); MAX_ORDER];
    b[0] = T::one();
    let base_order = m - v;
    // Cox-de Boor up to order m - v.
    for k in 1..base_order {
        let mut next = [T::zero(); MAX_ORDER];
        for (r, slot) in next.iter_mut().enumerate().take(k + 1) {
            let i = mu - k + r;
            let mut val = T::zero();
            if r >= 1 {
                let den = t[i + k] - t[i];
                if den > T::zero() {
                    val += (x - t[i]) / den * b[r - 1];
                }
            }
            if r < k {
                let den = t[i + k + 1] - t[i + 1];
                if den > T::zero() {
                    val += (t[i + k + 1] - x) / den * b[r];
                }
            }
            *slot = val;
        }
        b = next;
    }
    // Each remaining order step differentiates once.
    for k in base_order..m {
        let kk = T::from_usize_lossy(k);
        let mut next = [T::zero(); MAX_ORDER];
        for (r, slot) in next.iter_mut().enumerate().take(k + 1) {
            let i = mu - k + r;
            let mut val = T::zero();
            if r >= 1 {
                let den = t[i + k] - t[i];
                if den > T::zero() {
                    val += kk * b[r - 1] / den;
                }
            }
            if r < k {
                let den = t[i + k + 1] - t[i + 1];
                if den > T::zero() {
                    val -= kk * b[r] / den;
                }
            }
            *slot = val;
        }
        b = next;
    }
    out[..m].copy_from_slice(&b[..m]);
}

/// Empirical constants of the local-basis conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalBasisReport {
    /// `inf_x |p^(s)(x)| h^s` over the Monte Carlo points, `s` the derivative cap along the first coordinate.
    pub min_scaled_norm: f64,
    pub max_scaled_norm: f64,
    /// Smallest eigenvalue over cells of the exact local Gram integral divided by `h^d`.
    pub min_local_gram_eig: f64,
}

/// Gauss-Legendre nodes and weights on [-1, 1] with `n` points, `n <= 5`.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    match n {
        1 => (vec![0.0], vec![2.0]),
        2 => {
            let a = 1.0 / 3f64.sqrt();
            (vec![-a, a], vec![1.0, 1.0])
        }
        3 => {
            let a = (0.6f64).sqrt();
            (vec![-a, 0.0, a], vec![5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0])
        }
        4 => {
            let s = (6.0f64 / 5.0).sqrt() * 2.0 / 7.0;
            let (a, b) = ((3.0 / 7.0 - s).sqrt(), (3.0 / 7.0 + s).sqrt());
            let (wa, wb) = ((18.0 + 30f64.sqrt()) / 36.0, (18.0 - 30f64.sqrt()) / 36.0);
            (vec![-b, -a, a, b], vec![wb, wa, wa, wb])
        }
        _ => {
            let r = 2.0 * (10.0f64 / 7.0).sqrt();
            let (a, b) = ((5.0 - r).sqrt() / 3.0, (5.0 + r).sqrt() / 3.0);
            let s = 13.0 * 70f64.sqrt();
            let (wa, wb) = ((322.0 + s) / 900.0, (322.0 - s) / 900.0);
            (vec![-b, -a, 0.0, a, b], vec![wb, wa, 128.0 / 225.0, wa, wb])
        }
    }
}

/// Reports the local-basis constants: Monte Carlo for the scaled norms, exact
/// Gauss-Legendre quadrature for the per-cell Gram matrices.
pub fn check_local_basis<T: Scalar>(
    basis: &Basis<T>,
    n_mc: usize,
    seed: u64,
) -> Result<LocalBasisReport> {
    if n_mc < 100 {
        return Err(Error::InvalidInput(format!(
            "n_mc must be at least 100, got {n_mc}"
        )));
    }
    let part = basis.partition();
    let d = basis.dim();
    let h = part.h().as_f64();
    let mut v = vec![0usize; d];
    v[0] = basis.spec().deriv_cap;
    let scale = h.powi(v[0] as i32);
    let dom = part.domain();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = SparseVec::default();
    let mut x = vec![T::zero(); d];
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for _ in 0..n_mc {
        for j in 0..d {
            let u: f64 = rng.random();
            x[j] = dom.lower[j] + (dom.upper[j] - dom.lower[j]) * T::lit(u);
        }
        basis.eval_into(&x, &v, &mut buf)?;
        let norm = buf
            .values
            .iter()
            .map(|&a| a.as_f64().powi(2))
            .sum::<f64>()
            .sqrt()
            * scale;
        lo = lo.min(norm);
        hi = hi.max(norm);
    }

    let m = basis.order();
    let (nodes, weights) = gauss_legendre(m);
    let zero_v = vec![0usize; d];
    let ls = basis.local_size();
    let n_pts = m.pow(d as u32);
    let mut min_eig = f64::INFINITY;
    for cell in 0..part.cell_count() {
        let (clo, chi, _) = part.cell_geometry(cell)?;
        let active = basis.active(cell)?;
        let vol: f64 = clo
            .iter()
            .zip(&chi)
            .map(|(a, b)| (*b - *a).as_f64())
            .product();
        let mut gram = DMatrix::<f64>::zeros(ls, ls);
        for p in 0..n_pts {
            let mut rem = p;
            let mut w = vol / 2f64.powi(d as i32);
            for j in 0..d {
                let g = rem % m;
                rem /= m;
                let (a, b) = (clo[j].as_f64(), chi[j].as_f64());
                x[j] = T::lit(a + (b - a) * (nodes[g] + 1.0) / 2.0);
                w *= weights[g];
            }
            basis.eval_into(&x, &zero_v, &mut buf)?;
            let vals: Vec<f64> = active
                .iter()
                .map(|&k| {
                    buf.indices
                        .iter()
                        .position(|&i| i == k)
                        .map_or(0.0, |pos| buf.values[pos].as_f64())
                })
                .collect();
            for r in 0..ls {
                for c in 0..ls {
                    gram[(r, c)] += w * vals[r] * vals[c];
                }
            }
        }
        let eig = SymmetricEigen::new(gram).eigenvalues.min();
        min_eig = min_eig.min(eig / h.powi(d as i32));
    }
    Ok(LocalBasisReport {
        min_scaled_norm: lo,
        max_scaled_norm: hi,
        min_local_gram_eig: min_eig,
    })
}

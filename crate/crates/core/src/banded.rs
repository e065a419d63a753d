//! Symmetric banded matrices and their Cholesky factors.
//!
//! Storage keeps the lower band row by row: entry `(i, i - d)` for
//! `d = 0..=bw` sits at `data[i * (bw + 1) + d]`. Entries outside the band are
//! structurally zero.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct BandedMatrix<T: Scalar = f64> {
    n: usize,
    bw: usize,
    data: Vec<T>,
}

/// Cholesky breakdown: the pivot at `index` was not positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NotPositiveDefinite {
    pub index: usize,
    pub pivot: f64,
}

impl<T: Scalar> BandedMatrix<T> {
    pub fn zeros(n: usize, bw: usize) -> Self {
        let bw = bw.min(n.saturating_sub(1));
        Self {
            n,
            bw,
            data: vec![T::zero(); n * (bw + 1)],
        }
    }

    /// Copies the band of a symmetric dense matrix (lower triangle is read).
    pub fn from_dense(a: &[Vec<T>], bw: usize) -> Self {
        let mut out = Self::zeros(a.len(), bw);
        for i in 0..out.n {
            for j in i.saturating_sub(out.bw)..=i {
                out.set(i, j, a[i][j]);
            }
        }
        out
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        let d = r - c;
        (d <= self.bw).then_some(r * (self.bw + 1) + d)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.slot(i, j).map_or(T::zero(), |s| self.data[s])
    }

    /// Sets the symmetric pair `(i, j)`, `(j, i)`.
    ///
    /// # Panics
    /// If `(i, j)` lies outside the band.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let s = self.slot(i, j).expect("entry outside band");
        self.data[s] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: T) {
        let s = self.slot(i, j).expect("entry outside band");
        self.data[s] += v;
    }

    /// Adds `w * u u'` for a sparse `u` with increasing indices inside one band window.
    pub fn add_outer(&mut self, idx: &[usize], vals: &[T], w: T) {
        for (a, (&i, &vi)) in idx.iter().zip(vals).enumerate() {
            let wi = w * vi;
            for (&j, &vj) in idx[..=a].iter().zip(&vals[..=a]) {
                self.add(i, j, wi * vj);
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn diag(&self, i: usize) -> T {
        self.data[i * (self.bw + 1)]
    }

    pub fn trace(&self) -> T {
        (0..self.n).map(|i| self.diag(i)).sum()
    }

    pub fn add_diagonal(&mut self, v: T) {
        for i in 0..self.n {
            self.data[i * (self.bw + 1)] += v;
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<T>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.get(i, j)).collect())
            .collect()
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j).as_f64())
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); self.n];
        for i in 0..self.n {
            let row = &self.data[i * (self.bw + 1)..(i + 1) * (self.bw + 1)];
            y[i] += row[0] * x[i];
            for d in 1..=self.bw.min(i) {
                let j = i - d;
                y[i] += row[d] * x[j];
                y[j] += row[d] * x[i];
            }
        }
        y
    }

    /// `x' A y`.
    pub fn bilinear(&self, x: &[T], y: &[T]) -> T {
        let ay = self.matvec(y);
        x.iter().zip(&ay).map(|(&a, &b)| a * b).sum()
    }

    /// Largest absolute difference between the stored band and its symmetric partner
    /// in another matrix; used to compare cross blocks.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        let bw = self.bw.max(other.bw);
        let mut m = T::zero();
        for i in 0..self.n {
            for j in i.saturating_sub(bw)..=i {
                m = m.max((self.get(i, j) - other.get(i, j)).abs());
            }
        }
        m
    }

    pub fn cholesky(&self) -> Result<BandedCholesky<T>, NotPositiveDefinite> {
        let (n, bw) = (self.n, self.bw);
        let w = bw + 1;
        let mut l = self.data.clone();
        for j in 0..n {
            let mut s = l[j * w];
            for k in j.saturating_sub(bw)..j {
                let ljk = l[j * w + (j - k)];
                s -= ljk * ljk;
            }
            if !(s > T::zero()) || !s.is_finite() {
                return Err(NotPositiveDefinite {
                    index: j,
                    pivot: s.as_f64(),
                });
            }
            let djj = s.sqrt();
            l[j * w] = djj;
            for i in j + 1..=(j + bw).min(n.saturating_sub(1)) {
                let mut s = l[i * w + (i - j)];
                for k in i.saturating_sub(bw)..j {
                    s -= l[i * w + (i - k)] * l[j * w + (j - k)];
                }
                l[i * w + (i - j)] = s / djj;
            }
        }
        Ok(BandedCholesky { n, bw, l })
    }

    /// All eigenvalues, ascending, through a dense symmetric eigensolver.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.to_nalgebra())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }
}

/// Lower-triangular banded factor `L` with `A = L L'`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedCholesky<T: Scalar = f64> {
    n: usize,
    bw: usize,
    l: Vec<T>,
}

impl<T: Scalar> BandedCholesky<T> {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn min_pivot(&self) -> T {
        (0..self.n)
            .map(|i| self.l[i * (self.bw + 1)])
            .fold(T::infinity(), T::min)
    }

    /// Solves `L y = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut [T]) {
        let w = self.bw + 1;
        for i in 0..self.n {
            let mut s = b[i];
            for k in i.saturating_sub(self.bw)..i {
                s -= self.l[i * w + (i - k)] * b[k];
            }
            b[i] = s / self.l[i * w];
        }
    }

    /// Solves `L' x = y` in place.
    pub fn solve_upper_in_place(&self, y: &mut [T]) {
        let w = self.bw + 1;
        for i in (0..self.n).rev() {
            let mut s = y[i];
            for k in i + 1..=(i + self.bw).min(self.n - 1) {
                s -= self.l[k * w + (k - i)] * y[k];
            }
            y[i] = s / self.l[i * w];
        }
    }

    pub fn solve_in_place(&self, b: &mut [T]) {
        self.solve_lower_in_place(b);
        self.solve_upper_in_place(b);
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// `y = L x`.
    pub fn mul_lower(&self, x: &[T]) -> Vec<T> {
        let w = self.bw + 1;
        (0..self.n)
            .map(|i| {
                (i.saturating_sub(self.bw)..=i)
                    .map(|k| self.l[i * w + (i - k)] * x[k])
                    .sum()
            })
            .collect()
    }

    /// Dense inverse, column by column. Quadratic in `n`; diagnostics only.
    pub fn inverse_dense(&self) -> Vec<Vec<T>> {
        let mut inv = vec![vec![T::zero(); self.n]; self.n];
        let mut e = vec![T::zero(); self.n];
        for c in 0..self.n {
            e.iter_mut().for_each(|v| *v = T::zero());
            e[c] = T::one();
            self.solve_in_place(&mut e);
            for r in 0..self.n {
                inv[r][c] = e[r];
            }
        }
        inv
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toeplitz(n: usize, d: f64, o: f64) -> BandedMatrix<f64> {
        let mut a = BandedMatrix::zeros(n, 1);
        for i in 0..n {
            a.set(i, i, d);
            if i > 0 {
                a.set(i, i - 1, o);
            }
        }
        a
    }

    #[test]
    fn cholesky_solves_against_dense() {
        let a = toeplitz(12, 4.0, 1.0);
        let chol = a.cholesky().unwrap();
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let x = chol.solve(&b);
        let ax = a.matvec(&x);
        for (u, v) in ax.iter().zip(&b) {
            assert_relative_eq!(u, v, epsilon = 1e-13);
        }
        let dense = a
            .to_nalgebra()
            .cholesky()
            .unwrap()
            .solve(&nalgebra::DVector::from_vec(b.clone()));
        for (u, v) in x.iter().zip(dense.iter()) {
            assert_relative_eq!(u, v, max_relative = 1e-12);
        }
    }

    #[test]
    fn indefinite_detected() {
        let a = toeplitz(5, 1.0, 2.0);
        assert!(a.cholesky().is_err());
    }

    #[test]
    fn outer_product_accumulates_symmetrically() {
        let mut a = BandedMatrix::<f64>::zeros(4, 1);
        a.add_outer(&[1, 2], &[2.0, 3.0], 0.5);
        assert_eq!(a.get(1, 1), 2.0);
        assert_eq!(a.get(2, 1), 3.0);
        assert_eq!(a.get(1, 2), 3.0);
        assert_eq!(a.get(2, 2), 4.5);
        assert_eq!(a.get(0, 3), 0.0);
    }

    #[test]
    fn f32_factorization() {
        let a = BandedMatrix::<f32>::from_dense(&[vec![4.0, 1.0], vec![1.0, 3.0]], 1);
        let x = a.cholesky().unwrap().solve(&[1.0, 2.0]);
        assert!((4.0 * x[0] + x[1] - 1.0).abs() < 1e-6);
    }

    proptest::proptest! {
        #[test]
        fn banded_ops_match_dense(
            n in 1usize..30,
            bw in 0usize..5,
            vals in proptest::collection::vec(-1.0f64..1.0, 30 * 5),
            rhs in proptest::collection::vec(-1.0f64..1.0, 30),
        ) {
            // Diagonally dominant, hence positive definite.
            let mut a = BandedMatrix::<f64>::zeros(n, bw);
            for i in 0..n {
                a.set(i, i, 2.0 * bw as f64 + 1.0);
                for k in 1..=bw.min(i) {
                    a.set(i, i - k, vals[i * 5 + k - 1]);
                }
            }
            let dense = a.to_nalgebra();
            let b = nalgebra::DVector::from_column_slice(&rhs[..n]);
            let av = a.matvec(&rhs[..n]);
            let dv = &dense * &b;
            for i in 0..n {
                proptest::prop_assert!((av[i] - dv[i]).abs() < 1e-12);
            }
            let x = a.cholesky().unwrap().solve(&rhs[..n]);
            let xd = dense.cholesky().unwrap().solve(&b);
            for i in 0..n {
                proptest::prop_assert!((x[i] - xd[i]).abs() < 1e-10);
            }
        }
    }
}

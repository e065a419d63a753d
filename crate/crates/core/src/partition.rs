//! Tensor-product partitions of a rectangular covariate domain.
//!
//! Cells are half-open boxes `[a, b)` in every coordinate, except that the
//! topmost cell of each coordinate is closed on the right, so every point of
//! the closed domain belongs to exactly one cell. Cell indices are laid out
//! with the first coordinate varying fastest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default bound on the ratio of the largest to the smallest cell diameter.
pub const DEFAULT_MAX_RATIO: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Domain<T: Scalar = f64> {
    pub lower: Vec<T>,
    pub upper: Vec<T>,
}

impl<T: Scalar> Domain<T> {
    pub fn new(lower: Vec<T>, upper: Vec<T>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::InvalidInput(format!(
                "domain bounds must be non-empty and of equal length (got {} and {})",
                lower.len(),
                upper.len()
            )));
        }
        for (dim, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::DegenerateDomain {
                    dim,
                    lower: lo.as_f64(),
                    upper: hi.as_f64(),
                });
            }
        }
        Ok(Self { lower, upper })
    }

    /// The unit cube `[0, 1]^d`.
    pub fn unit(d: usize) -> Result<Self> {
        Self::new(vec![T::zero(); d], vec![T::one(); d])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Whether `x` lies in the closed box.
    pub fn contains(&self, x: &[T]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(&self.lower)
                .zip(&self.upper)
                .all(|((&v, &lo), &hi)| v >= lo && v <= hi)
    }
}

/// How interior knots are placed along each coordinate.
#[derive(Debug, Clone, Copy)]
pub enum KnotRule<'a, T> {
    Uniform,
    /// Per-coordinate empirical quantiles of row-major `n x d` samples.
    Quantile(&'a [T]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Partition<T: Scalar = f64> {
    domain: Domain<T>,
    knots: Vec<Vec<T>>,
    cells_per_dim: Vec<usize>,
    strides: Vec<usize>,
    cell_count: usize,
    h: T,
    min_diam: T,
}

impl<T: Scalar> Partition<T> {
    pub fn build(
        domain: Domain<T>,
        cells_per_dim: &[usize],
        rule: KnotRule<'_, T>,
    ) -> Result<Self> {
        Self::build_with_ratio(domain, cells_per_dim, rule, DEFAULT_MAX_RATIO)
    }

    pub fn build_with_ratio(
        domain: Domain<T>,
        cells_per_dim: &[usize],
        rule: KnotRule<'_, T>,
        max_ratio: f64,
    ) -> Result<Self> {
        let d = domain.dim();
        if cells_per_dim.len() != d || cells_per_dim.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "cells_per_dim must have {d} positive entries, got {cells_per_dim:?}"
            )));
        }
        let knots: Vec<Vec<T>> = match rule {
            KnotRule::Uniform => (0..d)
                .map(|j| uniform_knots(domain.lower[j], domain.upper[j], cells_per_dim[j]))
                .collect(),
            KnotRule::Quantile(samples) => {
                if samples.is_empty() || samples.len() % d != 0 {
                    return Err(Error::InvalidInput(format!(
                        "quantile knot rule needs row-major samples with {d} columns"
                    )));
                }
                (0..d)
                    .map(|j| {
                        let column: Vec<T> = samples.iter().skip(j).step_by(d).copied().collect();
                        quantile_knots(
                            &column,
                            domain.lower[j],
                            domain.upper[j],
                            cells_per_dim[j],
                            j,
                        )
                    })
                    .collect::<Result<_>>()?
            }
        };
        Self::from_knots_with_ratio(domain, knots, max_ratio)
    }

    /// Builds a partition from explicit per-coordinate knot sequences (endpoints included).
    pub fn from_knots(domain: Domain<T>, knots: Vec<Vec<T>>) -> Result<Self> {
        Self::from_knots_with_ratio(domain, knots, DEFAULT_MAX_RATIO)
    }

    pub fn from_knots_with_ratio(
        domain: Domain<T>,
        knots: Vec<Vec<T>>,
        max_ratio: f64,
    ) -> Result<Self> {
        let d = domain.dim();
        if knots.len() != d {
            return Err(Error::InvalidInput(format!(
                "expected {d} knot sequences, got {}",
                knots.len()
            )));
        }
        for (j, kj) in knots.iter().enumerate() {
            let ok_ends =
                kj.len() >= 2 && kj[0] == domain.lower[j] && kj[kj.len() - 1] == domain.upper[j];
            let increasing = kj.windows(2).all(|w| w[0] < w[1]);
            if !ok_ends || !increasing {
                return Err(Error::InvalidInput(format!(
                    "knots in coordinate {j} must increase strictly from the lower to the upper bound"
                )));
            }
        }
        let cells_per_dim: Vec<usize> = knots.iter().map(|k| k.len() - 1).collect();
        let mut strides = Vec::with_capacity(d);
        let mut acc = 1usize;
        for &c in &cells_per_dim {
            strides.push(acc);
            acc *= c;
        }
        let (mut max_sq, mut min_sq) = (T::zero(), T::zero());
        for kj in &knots {
            let widths = kj.windows(2).map(|w| w[1] - w[0]);
            let (lo, hi) = widths.fold((T::infinity(), T::zero()), |(lo, hi), w| {
                (lo.min(w), hi.max(w))
            });
            max_sq += hi * hi;
            min_sq += lo * lo;
        }
        let (h, min_diam) = (max_sq.sqrt(), min_sq.sqrt());
        let ratio = (h / min_diam).as_f64();
        if ratio > max_ratio * (1.0 + 1e-12) {
            return Err(Error::QuasiUniformityViolated {
                ratio,
                bound: max_ratio,
            });
        }
        Ok(Self {
            domain,
            knots,
            cells_per_dim,
            strides,
            cell_count: acc,
            h,
            min_diam,
        })
    }

    pub fn domain(&self) -> &Domain<T> {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn knots(&self) -> &[Vec<T>] {
        &self.knots
    }

    pub fn cells_per_dim(&self) -> &[usize] {
        &self.cells_per_dim
    }

    pub fn cell_count(&self) -> usize {
        self.cell_count
    }

    /// Mesh size: the largest cell diameter.
    pub fn h(&self) -> T {
        self.h
    }

    pub fn min_diam(&self) -> T {
        self.min_diam
    }

    /// Interval index of `v` along coordinate `j`, assuming `v` is in range.
    #[inline]
    pub fn locate_dim(&self, j: usize, v: T) -> usize {
        let kj = &self.knots[j];
        let last = kj.len() - 2;
        // Number of interior knots <= v.
        kj[1..=last].partition_point(|&k| k <= v).min(last)
    }

    pub fn locate(&self, x: &[T]) -> Result<usize> {
        if !self.domain.contains(x) {
            return Err(Error::OutOfDomain {
                point: x.iter().map(|v| v.as_f64()).collect(),
            });
        }
        Ok(x.iter()
            .enumerate()
            .map(|(j, &v)| self.locate_dim(j, v) * self.strides[j])
            .sum())
    }

    /// Per-coordinate interval indices of a cell.
    pub fn cell_multi_index(&self, cell: usize) -> Result<Vec<usize>> {
        if cell >= self.cell_count {
            return Err(Error::InvalidCell {
                cell,
                count: self.cell_count,
            });
        }
        Ok(self
            .cells_per_dim
            .iter()
            .zip(&self.strides)
            .map(|(&c, &s)| (cell / s) % c)
            .collect())
    }

    pub fn cell_from_multi_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(&i, &s)| i * s).sum()
    }

    /// Lower corner, upper corner and Euclidean diameter of a cell.
    pub fn cell_geometry(&self, cell: usize) -> Result<(Vec<T>, Vec<T>, T)> {
        let idx = self.cell_multi_index(cell)?;
        let lower: Vec<T> = idx
            .iter()
            .enumerate()
            .map(|(j, &i)| self.knots[j][i])
            .collect();
        let upper: Vec<T> = idx
            .iter()
            .enumerate()
            .map(|(j, &i)| self.knots[j][i + 1])
            .collect();
        let diam = lower
            .iter()
            .zip(&upper)
            .map(|(&a, &b)| (b - a) * (b - a))
            .sum::<T>()
            .sqrt();
        Ok((lower, upper, diam))
    }
}

fn uniform_knots<T: Scalar>(lo: T, hi: T, cells: usize) -> Vec<T> {
    let n = T::from_usize_lossy(cells);
    let mut k: Vec<T> = (0..=cells)
        .map(|i| lo + (hi - lo) * T::from_usize_lossy(i) / n)
        .collect();
    k[cells] = hi;
    k
}

fn quantile_knots<T: Scalar>(
    column: &[T],
    lo: T,
    hi: T,
    cells: usize,
    dim: usize,
) -> Result<Vec<T>> {
    let mut sorted = column.to_vec();
    if sorted.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite sample in coordinate {dim}"
        )));
    }
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < cells + 1 {
        return Err(Error::InvalidInput(format!(
            "coordinate {dim} has {} distinct values, need at least {}",
            distinct.len(),
            cells + 1
        )));
    }
    let n = sorted.len();
    let mut knots = Vec::with_capacity(cells + 1);
    knots.push(lo);
    for j in 1..cells {
        // Lower empirical quantile: the ceil(p n)-th order statistic.
        let rank = (j * n).div_ceil(cells).max(1);
        knots.push(sorted[rank - 1]);
    }
    knots.push(hi);
    if !knots.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::InvalidInput(format!(
            "quantile knots in coordinate {dim} are not strictly increasing"
        )));
    }
    Ok(knots)
}

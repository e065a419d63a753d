//! Experiment configuration (JSON) and its resolution to concrete values.

use std::path::PathBuf;

use pmest::basis::{Basis, BasisKind, BasisSpec};
use pmest::partition::{Domain, KnotRule, Partition};
use pmest::{Error, Result, SolverOptions};
use serde::{Deserialize, Serialize};

use crate::dgp::DgpSpec;

/// Number of cells per coordinate as a function of the sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum CellsRule {
    Fixed {
        cells: usize,
    },
    /// `round(c n^e)` with `e = 1/(2m + d)` or `1/(2m + d - 0.5)` when undersmoothing.
    /// Without an explicit constant, `c` is the largest value leaving at
    /// least `8 m^d` observations per cell at the smallest sample size.
    Rate {
        #[serde(default)]
        constant: Option<f64>,
        #[serde(default)]
        undersmooth: bool,
    },
}

impl Default for CellsRule {
    fn default() -> Self {
        CellsRule::Rate {
            constant: None,
            undersmooth: false,
        }
    }
}

/// Quantity whose band is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// `mu_0^(v)(x, q)` itself.
    #[default]
    Index,
    /// `eta(mu_0(x, q))`.
    Level,
    /// `eta'(mu_0) mu_0^(e_k)`.
    MarginalEffect,
}

fn default_order() -> usize {
    2
}
fn default_x_per_cell() -> usize {
    10
}
fn default_alpha() -> f64 {
    0.05
}
fn default_draws() -> usize {
    20_000
}
fn default_reps() -> usize {
    1
}
fn default_bootstrap() -> usize {
    500
}
fn default_eval_points() -> usize {
    201
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dgp: DgpSpec,
    #[serde(default = "default_basis")]
    pub basis: BasisKind,
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default)]
    pub cells: CellsRule,
    #[serde(default)]
    pub q_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub v: Option<Vec<usize>>,
    #[serde(default)]
    pub transform: Transform,
    /// Evaluation points per cell and coordinate for bands.
    #[serde(default = "default_x_per_cell")]
    pub x_per_cell: usize,
    /// Evaluation points per coordinate for error and remainder sups.
    #[serde(default = "default_eval_points")]
    pub eval_points: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_draws")]
    pub n_draws: usize,
    #[serde(default = "default_reps")]
    pub reps: usize,
    /// Sample sizes for rate and remainder studies; empty means `dgp.n` alone.
    #[serde(default)]
    pub n_ladder: Vec<usize>,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    /// Worker threads; falls back to `PMEST_THREADS`, then to all cores.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub solver: SolverOptions,
}

fn default_basis() -> BasisKind {
    BasisKind::Bspline
}

impl ExperimentConfig {
    pub fn new(dgp: DgpSpec) -> Self {
        Self {
            dgp,
            basis: default_basis(),
            order: default_order(),
            cells: CellsRule::default(),
            q_grid: None,
            v: None,
            transform: Transform::Index,
            x_per_cell: default_x_per_cell(),
            eval_points: default_eval_points(),
            alpha: default_alpha(),
            n_draws: default_draws(),
            reps: default_reps(),
            n_ladder: Vec::new(),
            bootstrap: default_bootstrap(),
            threads: None,
            output: None,
            solver: SolverOptions::default(),
        }
    }

    /// Fills every optional field so the report echoes exactly what ran.
    pub fn resolve(mut self) -> Result<Self> {
        if self.reps == 0 {
            return Err(Error::InvalidInput("reps must be at least 1".into()));
        }
        if self.x_per_cell == 0 || self.eval_points < 2 {
            return Err(Error::InvalidInput(
                "evaluation grids must be nonempty".into(),
            ));
        }
        BasisSpec::new(self.basis, self.order).validate()?;
        self.solver.validate()?;
        if self.q_grid.is_none() {
            self.q_grid = Some(self.dgp.default_q_grid());
        }
        if self.v.is_none() {
            let mut v = vec![0; self.dgp.dim()];
            if self.transform == Transform::MarginalEffect {
                v[0] = 1;
            }
            self.v = Some(v);
        }
        if self.v.as_ref().unwrap().len() != self.dgp.dim() {
            return Err(Error::InvalidInput(
                "v must have one entry per covariate".into(),
            ));
        }
        if self.n_ladder.is_empty() {
            self.n_ladder = vec![self.dgp.n];
        }
        if let CellsRule::Rate {
            constant: None,
            undersmooth,
        } = self.cells
        {
            let n_min = *self.n_ladder.iter().min().unwrap();
            self.cells = CellsRule::Rate {
                constant: Some(self.max_constant(n_min, undersmooth)),
                undersmooth,
            };
        }
        if let Some(threads) = self.threads {
            if threads == 0 {
                return Err(Error::InvalidInput("threads must be positive".into()));
            }
        }
        Ok(self)
    }

    pub fn q_grid(&self) -> &[f64] {
        self.q_grid.as_deref().expect("resolved config")
    }

    pub fn v(&self) -> &[usize] {
        self.v.as_deref().expect("resolved config")
    }

    fn exponent(&self, undersmooth: bool) -> f64 {
        let denom = (2 * self.order + self.dgp.dim()) as f64;
        1.0 / if undersmooth { denom - 0.5 } else { denom }
    }

    fn max_constant(&self, n_min: usize, undersmooth: bool) -> f64 {
        let d = self.dgp.dim() as i32;
        let per_cell = 8.0 * (self.order as f64).powi(d);
        let cells = (n_min as f64 / per_cell)
            .powf(1.0 / d as f64)
            .floor()
            .max(1.0);
        cells / (n_min as f64).powf(self.exponent(undersmooth))
    }

    /// Cells per coordinate at sample size `n`.
    pub fn cells_for(&self, n: usize) -> usize {
        match self.cells {
            CellsRule::Fixed { cells } => cells.max(1),
            CellsRule::Rate {
                constant,
                undersmooth,
            } => {
                let c = constant.expect("resolved config");
                ((c * (n as f64).powf(self.exponent(undersmooth))).round() as usize).max(1)
            }
        }
    }

    pub fn basis_for(&self, n: usize) -> Result<Basis> {
        let d = self.dgp.dim();
        let part = Partition::build(
            Domain::unit(d)?,
            &vec![self.cells_for(n); d],
            KnotRule::Uniform,
        )?;
        Basis::build(part, BasisSpec::new(self.basis, self.order))
    }

    /// Equispaced points covering the closed unit cube, first coordinate fastest.
    pub fn error_points(&self) -> Vec<Vec<f64>> {
        let d = self.dgp.dim();
        let m = if d == 1 {
            self.eval_points
        } else {
            self.eval_points.min(41)
        };
        let total = m.pow(d as u32);
        (0..total)
            .map(|mut r| {
                (0..d)
                    .map(|_| {
                        let v = (r % m) as f64 / (m - 1) as f64;
                        r /= m;
                        v
                    })
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::DgpName;

    #[test]
    fn rate_rule_leaves_enough_observations() {
        let mut cfg = ExperimentConfig::new(DgpSpec::new(DgpName::Qr1d, 500, 0));
        cfg.n_ladder = vec![500, 1000, 8000];
        let cfg = cfg.resolve().unwrap();
        let cells = cfg.cells_for(500);
        assert!(500 / cells >= 16);
        assert!(cfg.cells_for(8000) > cells);
        assert_eq!(cfg.q_grid().len(), 25);
    }

    #[test]
    fn config_round_trips_through_json() {
        let text = r#"{"dgp": {"name": "logit1d", "n": 2000, "seed": 4},
                       "cells": {"rule": "fixed", "cells": 12}, "transform": "level", "reps": 3}"#;
        let cfg: ExperimentConfig = serde_json::from_str(text).unwrap();
        let cfg = cfg.resolve().unwrap();
        assert_eq!(cfg.cells_for(10), 12);
        assert_eq!(cfg.q_grid(), &[0.0]);
        let back: ExperimentConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<ExperimentConfig>(
            r#"{"dgp": {"name": "qr1d", "n": 1, "seed": 0}, "bogus": 1}"#
        )
        .is_err());
        let zero = ExperimentConfig { reps: 0, ..cfg };
        assert!(zero.resolve().is_err());
    }
}

//! Partitioning-based M-estimation with uniform inference.
//!
//! The pipeline: build a [`Partition`](partition::Partition) of a rectangular
//! domain, a locally supported [`Basis`](basis::Basis) on it, fit the
//! coefficient process `beta(q)` for a [`LossModel`](loss::LossModel) over a
//! grid of loss indices ([`solver`]), assemble the sandwich variance
//! ([`sandwich`]) and simulate uniform confidence bands ([`inference`]).
//!
//! The geometric and banded linear-algebra layers are generic over the
//! [`Scalar`] type; the statistical layers work in `f64`.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod banded;
pub mod basis;
pub mod error;
pub mod inference;
pub mod loss;
pub mod partition;
pub mod rng;
pub mod sandwich;
pub mod scalar;
pub mod solver;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Domain = partition::Domain<f64>;
pub type Partition = partition::Partition<f64>;
pub type Basis = basis::Basis<f64>;
pub type SparseVec = basis::SparseVec<f64>;
pub type BandedMatrix = banded::BandedMatrix<f64>;
pub type BandedCholesky = banded::BandedCholesky<f64>;

pub type DomainF32 = partition::Domain<f32>;
pub type PartitionF32 = partition::Partition<f32>;
pub type BasisF32 = basis::Basis<f32>;
pub type BandedMatrixF32 = banded::BandedMatrix<f32>;

pub use basis::{BasisKind, BasisSpec};
pub use inference::{BandResult, EvalGrid, SimMethod, SimOptions};
pub use loss::{Link, LossKind, LossModel};
pub use partition::KnotRule;
pub use sandwich::SandwichSet;
pub use solver::{fit, BoxRadius, Dataset, FitResult, SolverOptions};

use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("degenerate domain: coordinate {dim} has lower {lower} >= upper {upper}")]
    DegenerateDomain { dim: usize, lower: f64, upper: f64 },

    #[error("partition is not quasi-uniform: max/min cell diameter ratio {ratio:.4} exceeds bound {bound}")]
    QuasiUniformityViolated { ratio: f64, bound: f64 },

    #[error("point {point:?} lies outside the closed domain")]
    OutOfDomain { point: Vec<f64> },

    #[error("cell index {cell} out of range (partition has {count} cells)")]
    InvalidCell { cell: usize, count: usize },

    #[error("unsupported basis order {order} (maximum {max})")]
    UnsupportedOrder { order: usize, max: usize },

    #[error("derivative order {requested} exceeds the basis derivative cap {cap}")]
    DerivativeOrderTooHigh { requested: usize, cap: usize },

    #[error("link range ({lo}, {hi}) is not contained in (0, 1)")]
    LinkRangeInvalid { lo: f64, hi: f64 },

    #[error("Lp exponent {0} must lie in (1, 2]")]
    InvalidP(f64),

    #[error("response {value} at row {row} is outside [0, 1]")]
    ResponseOutOfRange { row: usize, value: f64 },

    #[error("robustness tuning constant must be positive, got {0}")]
    NonPositiveTuning(f64),

    #[error("cell {cell} has {count} observations, fewer than the required {required}")]
    CellTooSparse {
        cell: usize,
        count: usize,
        required: usize,
    },

    #[error("loss is not convex in the index; a box radius is required")]
    BoxRequired,

    #[error("Q matrix at q = {q} is numerically singular (smallest pivot {min_pivot:e})")]
    SingularQ { q: f64, min_pivot: f64 },

    #[error("grid covariance could not be repaired to positive semi-definite")]
    CovarianceNotPsd,

    #[error("estimated variance at q = {q} is not positive ({omega:e})")]
    DegenerateVariance { q: f64, omega: f64 },

    #[error("operation requires {expected}")]
    WrongModel { expected: &'static str },

    #[error("fits do not share the same basis and loss")]
    BasisMismatch,

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl Error {
    /// True for failures of the numerical machinery rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularQ { .. }
                | Error::CovarianceNotPsd
                | Error::DegenerateVariance { .. }
                | Error::QuasiUniformityViolated { .. }
        )
    }

    /// Module whose invariant the error reports.
    pub fn module(&self) -> &'static str {
        match self {
            Error::DegenerateDomain { .. }
            | Error::QuasiUniformityViolated { .. }
            | Error::OutOfDomain { .. }
            | Error::InvalidCell { .. } => "partition",
            Error::UnsupportedOrder { .. } | Error::DerivativeOrderTooHigh { .. } => "basis",
            Error::LinkRangeInvalid { .. }
            | Error::InvalidP(_)
            | Error::ResponseOutOfRange { .. }
            | Error::NonPositiveTuning(_) => "loss",
            Error::CellTooSparse { .. } | Error::BoxRequired => "solver",
            Error::SingularQ { .. } | Error::DegenerateVariance { .. } => "sandwich",
            Error::CovarianceNotPsd | Error::WrongModel { .. } | Error::BasisMismatch => {
                "inference"
            }
            Error::InvalidInput(_) => "input",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

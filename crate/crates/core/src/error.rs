use core::fmt;

/// Failures raised by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    DimensionMismatch { expected: usize, found: usize },
    /// Covariance or precision whose estimated condition number exceeds the guard.
    DegenerateCovariance { condition: f64 },
    NotPositiveDefinite,
    InvalidParameter(&'static str),
    InvalidOutcome { likelihood: &'static str, value: f64 },
    NonFinite(&'static str),
    /// Cholesky step still infeasible after the allowed number of halvings.
    StepRejected { halvings: usize },
    NoPositiveRoot,
    EmptyBatch,
    Unsupported(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch { expected, found } => {
                write!(f, "dimension mismatch: expected {expected}, found {found}")
            }
            Error::DegenerateCovariance { condition } => {
                write!(f, "degenerate covariance (condition estimate {condition:e})")
            }
            Error::NotPositiveDefinite => f.write_str("matrix is not positive definite"),
            Error::InvalidParameter(what) => write!(f, "invalid parameter: {what}"),
            Error::InvalidOutcome { likelihood, value } => {
                write!(f, "outcome {value} is not valid for the {likelihood} likelihood")
            }
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::StepRejected { halvings } => {
                write!(f, "step rejected after {halvings} halvings")
            }
            Error::NoPositiveRoot => f.write_str("polynomial has no positive real root"),
            Error::EmptyBatch => f.write_str("empty minibatch"),
            Error::Unsupported(what) => write!(f, "unsupported: {what}"),
        }
    }
}

impl core::error::Error for Error {}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },
    #[error("no rows")]
    Empty,
    #[error("ragged input: row {row} has {found} columns, expected {expected}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("distributions are defined over different point clouds")]
    CloudMismatch,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("Sinkhorn iteration did not converge after {iterations} iterations (last residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("Cholesky factorization failed in Nyström sketch; the operator is numerically indefinite, try a larger stabilizing shift")]
    CholeskyFailed,
    #[error("numerically degenerate quadratic form: value {0:e} is negative beyond roundoff")]
    NegativeQuadraticForm(f64),
    #[error("recombination defect: {0}")]
    Recombination(String),
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A malformed value in a matrix file. `row` and `col` are 0-based.
    #[error("row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },

    #[error("row {row} has {found} values, expected {expected}")]
    Ragged {
        row: usize,
        found: usize,
        expected: usize,
    },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("matrix is empty")]
    EmptyMatrix,

    #[error("bad header: {0}")]
    BadHeader(String),

    #[error("k = {k} is out of range 1..={m}")]
    KOutOfRange { k: usize, m: usize },

    #[error("gamma must be positive and finite, got {0}")]
    InvalidGamma(f64),

    #[error("invalid subset: {0}")]
    InvalidSubset(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("symmetric eigensolver did not converge")]
    EigenFailed,

    #[error("non-finite intermediate value at greedy step {step}")]
    NonFiniteIntermediate { step: usize },

    #[error("random selection requires a seed")]
    MissingSeed,

    #[error("exhaustive enumeration of {count} subsets exceeds the cap of {cap}; use Monte Carlo mode")]
    CapExceeded { count: u128, cap: u64 },

    #[error("objective `{0}` cannot be used for subset ranking")]
    UnsupportedObjective(&'static str),

    #[error("invalid config at `{field}`: {msg}")]
    Config { field: String, msg: String },
}

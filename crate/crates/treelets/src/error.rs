//! Crate-wide error type.

use thiserror::Error;

/// Errors reported by the treelet library.
#[derive(Debug, Error)]
pub enum Error {
    /// Input contains NaN or an infinity.
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    /// Fewer observations than the operation requires.
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },

    /// Fewer variables than the operation requires.
    #[error("need at least {needed} columns, got {got}")]
    TooFewColumns { needed: usize, got: usize },

    /// A matrix that must be square is not.
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    /// A matrix that must be symmetric is not, beyond tolerance.
    #[error("asymmetric at ({row}, {col}): |a_ij - a_ji| = {gap:e}")]
    NotSymmetric { row: usize, col: usize, gap: f64 },

    /// A covariance diagonal entry is negative.
    #[error("negative variance {value:e} at index {index}")]
    NegativeVariance { index: usize, value: f64 },

    /// Vector or matrix dimensions do not line up.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A requested tree level exceeds the model height.
    #[error("level {level} out of range (model height {max})")]
    LevelOutOfRange { level: usize, max: usize },

    /// An index is outside the valid range.
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    /// The input carries too little signal to fit the requested tree.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A covariance specification is not positive semidefinite.
    #[error("covariance not positive semidefinite: {0}")]
    NotPositiveSemidefinite(String),

    /// A configuration value is out of its documented range.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A serialized model fails semantic validation.
    #[error("invalid model: {0}")]
    ModelInvalid(String),

    /// Coefficients do not match the model and level they claim.
    #[error("coefficient mismatch: {0}")]
    CoefficientMismatch(String),

    /// Interferent vectors are linearly dependent.
    #[error("interferent vector {index} is linearly dependent on the preceding ones")]
    RankDeficient { index: usize },

    /// Classification input with too few distinct classes.
    #[error("need at least 2 classes, got {found}")]
    TooFewClasses { found: usize },

    /// A class has too few samples for the requested statistic.
    #[error("class {class} has {got} samples, need at least {needed}")]
    TooFewClassSamples {
        class: usize,
        got: usize,
        needed: usize,
    },

    /// Every bootstrap replicate was rejected by the distance threshold.
    #[error("no bootstrap replicate passed the acceptance threshold")]
    NoAcceptedReplicates,

    /// Model (de)serialization failure.
    #[error("model serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

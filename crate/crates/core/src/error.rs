use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid simplex vector: {0}")]
    InvalidSimplex(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("value outside generator domain: {0}")]
    OutOfDomain(f64),

    #[error("boundary prediction: entry {value:e} below {threshold:e} is not allowed for the log score")]
    Boundary { value: f64, threshold: f64 },

    #[error("vanishing embedding norm: {0}")]
    DegenerateNorm(String),

    #[error("degenerate variable: {0}")]
    DegenerateVariable(String),

    #[error("ridge system is singular for lambda = {0}")]
    SingularRidge(f64),

    #[error("overlapping splits: {0}")]
    OverlappingSplits(String),

    #[error("enumeration budget exceeded: {needed} joint atoms (max {max})")]
    BudgetExceeded { needed: usize, max: usize },

    #[error("ragged ensemble grid: {0}")]
    RaggedGrid(String),

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

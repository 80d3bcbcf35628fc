use thiserror::Error;

/// Errors raised while reading or indexing a sound-change dataset.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum DataError {
    #[error("missing required column `{0}` in header")]
    MissingColumn(String),
    #[error("row {row}: field `{column}` is empty")]
    EmptyField { row: usize, column: String },
    #[error("row {row}: input is not valid UTF-8")]
    NonUtf8Input { row: usize },
    #[error("row {row}: expected {expected} tab-separated fields, found {found}")]
    FieldCount {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

/// Numeric failures in the model, transforms and inference.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite density: {0}")]
    NonFiniteDensity(String),
    #[error("non-finite gradient at coordinate {index}")]
    NonFiniteGradient { index: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("degenerate mass: unnormalized posterior sums to {0:e}")]
    DegenerateMass(f64),
    #[error("grid too large: {cells:e} cells exceeds the limit of {limit:e}")]
    GridTooLarge { cells: f64, limit: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("run {run}, step {step}: {source}")]
    InRun {
        run: usize,
        step: usize,
        #[source]
        source: Box<ModelError>,
    },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

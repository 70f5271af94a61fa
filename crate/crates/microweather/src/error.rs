//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong, from ingestion to inference.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid observation: {0}")]
    InvalidObservation(String),

    #[error("partition error: {0}")]
    PartitionError(String),

    #[error("schema error: {0}")]
    SchemaError(String),

    #[error("station {station} lies outside the coarse grid hull ({detail})")]
    CoverageError { station: String, detail: String },

    #[error("time axis error: {0}")]
    TimeAxisError(String),

    #[error("cannot fill channel with no valid values: {0}")]
    FillError(String),

    #[error("query ({lat}, {lon}) outside coarse grid hull")]
    OutOfHull { lat: f64, lon: f64 },

    #[error("timestamp {0} not on the coarse time axis")]
    UnknownTimestamp(i64),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint version mismatch: {0}")]
    VersionError(String),

    #[error("checkpoint corrupt: {0}")]
    CorruptChecksum(String),

    #[error("model config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("encoding error: {0}")]
    EncodingError(String),

    #[error("surface vector dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("chip shape error: {0}")]
    ShapeError(String),

    #[error("token role mismatch: {0}")]
    RoleMismatch(String),

    #[error("attention mask row {0} has no allowed entries")]
    MaskRowEmpty(usize),

    #[error("empty batch: no valid channels to score")]
    EmptyBatch,

    #[error("need at least {needed} valid stations, got {got}")]
    InsufficientStations { needed: usize, got: usize },

    #[error("interpolation system is singular: {0}")]
    SingularSystem(String),

    #[error("empty sample: no valid records")]
    EmptySample,

    #[error("k = {k} exceeds backbone size {n}")]
    KTooLarge { k: usize, n: usize },

    #[error("missing checkpoint for variant {0}")]
    MissingCheckpoint(String),

    #[error("surface mode mismatch: {0}")]
    SurfaceModeMismatch(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::EmptyBatch
            | Error::MaskRowEmpty(_)
            | Error::SingularSystem(_)
            | Error::Divergence { .. }
            | Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}

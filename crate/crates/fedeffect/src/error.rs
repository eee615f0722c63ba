//! Crate-wide error type with process exit-code classes.

use thiserror::Error;

/// Every failure the toolkit can report.
///
/// Variants are grouped into three exit-code classes: numeric failures (1),
/// I/O failures (2), and validation failures (3). See [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix is not positive definite even after jitter escalation.
    #[error("matrix of dimension {dim} is not positive definite (last jitter tried: {jitter:e})")]
    NotPositiveDefinite { dim: usize, jitter: f64 },

    /// Operand dimensions are incompatible.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// Wishart degrees of freedom below the admissible range.
    #[error("invalid Wishart degrees of freedom {dof}: must be at least {min}")]
    InvalidDegreesOfFreedom { dof: f64, min: f64 },

    /// Too few samples for the requested statistic.
    #[error("insufficient data in {context}: need at least {need} samples, got {got}")]
    InsufficientData {
        context: &'static str,
        need: usize,
        got: usize,
    },

    /// An objective evaluation produced NaN or infinity.
    #[error("non-finite loss at coordinate {coordinate}")]
    NonFiniteLoss { coordinate: usize },

    /// A worker died or returned an error mid-round.
    #[error("worker for source {source_id} failed in round {round}: {detail}")]
    WorkerFailure {
        source_id: usize,
        round: usize,
        detail: String,
    },

    /// The server did not receive a report from every source.
    #[error("round {round} is missing a gradient report from source {source_id}")]
    MissingReport { round: usize, source_id: usize },

    /// A report arrived tagged with the wrong round.
    #[error("expected report for round {expected}, got round {got} from source {source_id}")]
    RoundMismatch {
        expected: usize,
        got: usize,
        source_id: usize,
    },

    /// Parameters left the finite range during optimization.
    #[error("non-finite parameters after round {round}")]
    NonFiniteParameters { round: usize },

    /// An estimate was requested from an empty draw set.
    #[error("no predictive draws available for {context}")]
    EmptyDraws { context: &'static str },

    /// A record key was empty.
    #[error("empty primary key at row {row}")]
    EmptyKey { row: usize },

    /// A row index points outside the source.
    #[error("row index {index} out of range for source with {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    /// A file did not match the expected tabular schema.
    #[error("schema error in {path}: {detail}")]
    SchemaError { path: String, detail: String },

    /// A treatment value outside {{0, 1}}.
    #[error("non-binary treatment value {value} at row {row}")]
    NonBinaryTreatment { value: f64, row: usize },

    /// Configuration rejected.
    #[error("invalid configuration: {detail}")]
    InvalidConfig { detail: String },

    /// Two containers disagree in shape.
    #[error("shape mismatch in {context}: {detail}")]
    ShapeMismatch {
        context: &'static str,
        detail: String,
    },

    /// Evaluation requested without ground-truth outcome columns.
    #[error("cannot evaluate {path}: ground-truth outcome columns are absent")]
    MissingTruth { path: String },

    /// Underlying I/O failure.
    #[error("i/o error on {path}: {source}")]
    IoError {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code class: 1 numeric, 2 I/O, 3 validation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NotPositiveDefinite { .. }
            | Error::InvalidDegreesOfFreedom { .. }
            | Error::NonFiniteLoss { .. }
            | Error::NonFiniteParameters { .. }
            | Error::WorkerFailure { .. }
            | Error::MissingReport { .. }
            | Error::RoundMismatch { .. }
            | Error::EmptyDraws { .. } => 1,
            Error::IoError { .. } => 2,
            Error::DimensionMismatch { .. }
            | Error::InsufficientData { .. }
            | Error::EmptyKey { .. }
            | Error::IndexOutOfRange { .. }
            | Error::SchemaError { .. }
            | Error::NonBinaryTreatment { .. }
            | Error::InvalidConfig { .. }
            | Error::ShapeMismatch { .. }
            | Error::MissingTruth { .. } => 3,
        }
    }

    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::IoError {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Every failure the estimators, samplers and harness can report.
#[derive(Debug, Error)]
pub enum EivError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{matrix} is numerically singular (reciprocal condition {rcond:.3e})")]
    Singular { matrix: &'static str, rcond: f64 },

    #[error("pilot estimate failed ({source}); increase the pilot size r0 (currently {r0})")]
    PilotFailure {
        r0: usize,
        #[source]
        source: Box<EivError>,
    },

    #[error("measurement-error covariance needs at least one record with two or more replicates")]
    InsufficientReplication,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("sampling plan is degenerate: {0}")]
    DegeneratePlan(&'static str),

    #[error("invalid value: {0}")]
    InvalidInput(String),

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("requested {requested} records but only {available} are available")]
    Size { requested: usize, available: usize },

    #[error("variance unavailable: {0}")]
    VarianceUnavailable(&'static str),

    #[error("column {0:?} not found in header")]
    MissingColumn(String),

    #[error("column {0:?} has zero variance and cannot be standardized")]
    DegenerateColumn(String),

    #[error("invalid column specification: {0}")]
    Schema(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl EivError {
    /// True for errors produced by the linear algebra rather than by input validation.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            EivError::Singular { .. }
                | EivError::PilotFailure { .. }
                | EivError::DegeneratePlan(_)
                | EivError::VarianceUnavailable(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EivError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = EivError> = std::result::Result<T, E>;

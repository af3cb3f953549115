use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the fitting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv row {row}: {message}")]
    CsvRow { row: usize, message: String },

    #[error("csv: {0}")]
    Csv(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dataset needs at least 2 subjects, found {0}")]
    TooFewSubjects(usize),

    #[error("covariate column z{column} has zero variance and cannot be standardized")]
    ZeroVariance { column: usize },

    #[error("cannot normalize a direction with norm {0:e}")]
    ZeroDirection(f64),

    #[error("flat link along index: every local index slope is numerically zero")]
    FlatLink,

    #[error("degenerate index curvature: the restricted curvature matrix is singular")]
    DegenerateCurvature,

    #[error("all {0} starting values failed to produce a fit")]
    AllStartsFailed(usize),

    #[error("no admissible bandwidth candidate (every candidate stranded more than {gate_pct}% of held-out points); try a grid with larger bandwidths")]
    NoAdmissibleBandwidth { gate_pct: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// Process exit code: 2 for bad input, 1 for numeric or convergence failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::CsvRow { .. }
            | Error::Csv(_)
            | Error::InvalidInput(_)
            | Error::TooFewSubjects(_)
            | Error::ZeroVariance { .. } => 2,
            Error::ZeroDirection(_)
            | Error::FlatLink
            | Error::DegenerateCurvature
            | Error::AllStartsFailed(_)
            | Error::NoAdmissibleBandwidth { .. }
            | Error::Numerical(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

//! Error type shared across the estimation pipeline.
//!
//! Errors split into two classes: `Input` covers malformed or inconsistent
//! data handed to the library, `Numeric` covers failures arising during
//! estimation (singular systems, insufficient local data, degenerate
//! bootstrap scales). The class drives the CLI exit code.

use thiserror::Error;

/// Broad failure class, used by callers to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad or inconsistent input data.
    Input,
    /// Numerical failure during estimation.
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("basis dimension K={k} must be smaller than the sample size n={n}")]
    BasisDimension { k: usize, n: usize },

    #[error(
        "sample Gram matrix is numerically singular even after ridge regularization \
         (relative residual {residual:.3e})"
    )]
    SingularGram { residual: f64 },

    #[error(
        "insufficient local data at t={t}: effective kernel mass {mass:.4} is below \
         the floor {floor:.4}"
    )]
    InsufficientMass { t: f64, mass: f64, floor: f64 },

    #[error("degenerate bootstrap scale: sigma is zero at grid index {index}")]
    DegenerateScale { index: usize },

    #[error("M-estimation did not reach a certified optimum at t={t}")]
    Unconverged { t: f64 },

    #[error(
        "{dropped} of {total} bootstrap replicates failed, exceeding the allowed \
         fraction {max_frac}"
    )]
    TooManyDrops {
        dropped: usize,
        total: usize,
        max_frac: f64,
    },

    #[error("no usable candidate: {0}")]
    NoCandidate(String),

    #[error(
        "simulation cell aborted: {failed} of {reps} replications failed, exceeding \
         the allowed fraction {max_frac}"
    )]
    CellAborted {
        failed: usize,
        reps: usize,
        max_frac: f64,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Classify the error for exit-code mapping.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidInput(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_)
            | Error::BasisDimension { .. } => ErrorClass::Input,
            Error::SingularGram { .. }
            | Error::InsufficientMass { .. }
            | Error::DegenerateScale { .. }
            | Error::Unconverged { .. }
            | Error::TooManyDrops { .. }
            | Error::NoCandidate(_)
            | Error::CellAborted { .. } => ErrorClass::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

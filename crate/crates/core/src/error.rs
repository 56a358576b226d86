use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no DFT bin falls inside the requested band [{f_min}, {f_max}] Hz")]
    EmptyBand { f_min: f64, f_max: f64 },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A simulation produced a non-finite value at sample `k`.
    #[error("simulation diverged at sample {k}")]
    DivergedAt { k: usize },

    #[error("parameter layout error: expected {expected} entries, got {got}")]
    LayoutError { expected: usize, got: usize },

    #[error("state {index} has degenerate standard deviation {std:e}")]
    DegenerateState { index: usize, std: f64 },

    #[error("BLA estimate is unstable (spectral radius {radius})")]
    UnstableBla { radius: f64 },

    #[error("nonlinear input channel {index} has degenerate standard deviation {std:e}")]
    DegenerateChannel { index: usize, std: f64 },

    #[error("residual function failed at the starting point: {0}")]
    InvalidStart(Box<Error>),

    #[error("evaluation window is empty: discarding {discard} of {n} samples")]
    EmptyEvaluation { discard: usize, n: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

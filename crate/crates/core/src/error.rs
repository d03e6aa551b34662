use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("grid mismatch between reference and prediction")]
    GridMismatch,

    #[error("reference field has zero norm")]
    ZeroNorm,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("pooling window M={window} does not divide resolution {resolution}")]
    PoolWindow { window: usize, resolution: usize },

    #[error("invalid knots: {0}")]
    InvalidKnots(String),

    #[error("solver became unstable at step {step} (t = {time}): {detail}")]
    Unstable {
        step: usize,
        time: f64,
        detail: String,
    },

    #[error("solver failure on snapshot {index} (seed {seed}): {source}")]
    Snapshot {
        index: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
        /// The model as it stood after the last step with a finite loss.
        last_good: Box<crate::deeponet::DeepOnet>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use crate::sampler::ChainTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric fault (NaN) produced by `{op}`")]
    NumericFault { op: &'static str },

    #[error("expected a scalar output, got shape {shape:?}")]
    NonScalar { shape: Vec<usize> },

    #[error("chain diverged at step {step}")]
    Divergence {
        step: usize,
        /// Trace recorded up to (not including) the failing step.
        trace: Option<Box<ChainTrace>>,
    },

    #[error("training step {step} (batch {batch}) failed: {source}")]
    TrainStep {
        step: u64,
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("ill-conditioned system (condition number {cond:.3e})")]
    IllConditioned { cond: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {format} data at byte {offset}: {msg}")]
    Format {
        format: &'static str,
        offset: usize,
        msg: String,
    },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

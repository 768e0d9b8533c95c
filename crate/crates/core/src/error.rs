use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("tape does not match the layer stack it is replayed against")]
    TapeMismatch,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("output directory {0} is not empty (pass --force to overwrite)")]
    OutputExists(PathBuf),

    #[error("client {client} failed in round {round}: {source}")]
    ClientFailure {
        client: usize,
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// 1 for problems with the user's input, 2 for failures during a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::OutputExists(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: msg.into(),
        }
    }
}

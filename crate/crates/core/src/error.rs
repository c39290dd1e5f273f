use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("stain estimation failed: {0}")]
    StainEstimation(String),

    #[error("histogram has fewer than two distinct non-empty bins")]
    DegenerateHistogram,

    #[error("class {0} has no samples")]
    EmptyClass(String),

    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),

    #[error("cache does not belong to the current model parameters")]
    StaleCache,

    #[error("parameter vectors are not congruent: {0}")]
    Incongruent(String),

    #[error("client {client_id} failed in round {round}: {cause}")]
    ClientFailure {
        client_id: usize,
        round: usize,
        cause: String,
    },

    #[error("aggregation failed: {0}")]
    Aggregation(String),

    #[error("partitioning failed: {0}")]
    Partition(String),

    #[error("corrupt parameter payload: {0}")]
    Payload(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: malformed manifest row: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("metrics undefined: {0}")]
    Metrics(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable process exit code for this error class: 1 config, 2 I/O, 3 training failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::UnknownBackbone(_) => 1,
            Error::Io { .. }
            | Error::Manifest { .. }
            | Error::Payload(_)
            | Error::Checkpoint(_)
            | Error::Image(_)
            | Error::Json(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

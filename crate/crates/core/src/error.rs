use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid flow space: {0}")]
    InvalidSpec(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("sampling exhausted: found {found} of {requested} distinct flows after {attempts} draws")]
    SamplingExhausted {
        requested: usize,
        found: usize,
        attempts: u64,
    },

    #[error("invalid flow: {0}")]
    InvalidFlow(String),

    #[error("malformed one-hot matrix: {0}")]
    MalformedMatrix(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("tool failure: {message}\n--- captured output ---\n{output}")]
    ToolFailure { message: String, output: String },

    #[error("parse error: pattern `{pattern}` did not match tool output; tail:\n{context}")]
    Parse { pattern: String, context: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("run aborted: {failed} of {total} oracle evaluations failed (partial artifacts kept in {dir})")]
    Aborted {
        failed: usize,
        total: usize,
        dir: PathBuf,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("stage-order error: missing {}", .0.display())]
    StageOrder(PathBuf),

    #[error("run directory {} is locked by another process", .0.display())]
    Locked(PathBuf),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

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

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidSpec(_) | Error::Argument(_) => 2,
            Error::StageOrder(_) | Error::Locked(_) => 3,
            Error::ToolFailure { .. } | Error::Parse { .. } | Error::Aborted { .. } => 4,
            Error::Divergence { .. } => 5,
            _ => 1,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("task has no prompt embeddings")]
    EmptyTask,

    #[error("infeasible stream spec: {0}")]
    InfeasibleSpec(String),

    #[error("invalid observation {0} (must be finite)")]
    InvalidObservation(f64),

    #[error("similarity model is in cold-start mode; use the logit fallback")]
    ColdStart,

    #[error("unknown cluster {0}")]
    UnknownCluster(usize),

    #[error("adapter for cluster {0} already allocated")]
    DuplicateAdapter(usize),

    #[error("no adapter allocated for cluster {0}")]
    MissingAdapter(usize),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("task generation failed: {0}")]
    Generation(String),

    #[error("training diverged on task {task_id} at epoch {epoch}: loss = {loss}")]
    Divergence { task_id: String, epoch: usize, loss: f64 },

    #[error("metric undefined: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Internal,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::InfeasibleSpec(_) => ErrorClass::Config,
            Error::Parse { .. }
            | Error::DimensionMismatch { .. }
            | Error::DegenerateInput(_)
            | Error::EmptyTask
            | Error::Io { .. }
            | Error::Json { .. }
            | Error::EmptyDataset => ErrorClass::Data,
            _ => ErrorClass::Internal,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.class() {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Internal => 1,
        }
    }
}

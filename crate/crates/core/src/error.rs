use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SptError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SptError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid config: {field}: {constraint}")]
    Config { field: String, constraint: String },

    #[error("invalid annotation: {0}")]
    Annotation(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss} (task {task}, select {select})")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
        task: f64,
        select: f64,
    },
}

impl SptError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        SptError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SptError::Io {
            path: path.into(),
            source,
        }
    }
}

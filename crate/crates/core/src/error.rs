use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped so the command-line front end can map them onto exit
/// codes: input/data problems versus numerical failures.
#[derive(Debug, Error)]
pub enum McaError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad embedding file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("bad metadata: {0}")]
    Metadata(String),
    #[error("taxonomy error: {0}")]
    Taxonomy(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("row {row} is the zero vector and cannot be normalized")]
    ZeroRow { row: usize },
    #[error("cluster {cluster} received no assignment mass")]
    DeadCluster { cluster: usize },
    #[error("empty result: {0}")]
    Empty(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("assumption violated: {0}")]
    Assumption(String),
}

impl McaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        McaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        McaError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures that come from the numbers rather than the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            McaError::Numeric(_) | McaError::DeadCluster { .. } | McaError::Assumption(_)
        )
    }

    /// 1 for bad arguments, 3 for numerical failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        if self.is_numeric() {
            3
        } else if matches!(self, McaError::InvalidArgument(_)) {
            1
        } else {
            2
        }
    }
}

pub type Result<T, E = McaError> = std::result::Result<T, E>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("mixed manifests in sweep: {0:?} (use --force to analyze anyway)")]
    MixedManifest(Vec<String>),

    #[error("numerical check failed: {0}")]
    Numerical(String),

    #[error(transparent)]
    Core(#[from] okdrop_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    pub fn validation(msg: impl Into<String>) -> Self {
        HarnessError::Validation(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for bad input, 3 for numerical failures, 1 for
    /// everything else (I/O, serialization).
    pub fn exit_code(&self) -> i32 {
        use okdrop_core::Error as E;
        match self {
            HarnessError::Parse { .. } | HarnessError::Validation(_) | HarnessError::MixedManifest(_) => 2,
            HarnessError::Numerical(_) => 3,
            HarnessError::Core(e) => match e {
                E::Convergence(_) => 3,
                E::Io(_) => 1,
                _ => 2,
            },
            HarnessError::Io { .. } | HarnessError::Json(_) | HarnessError::Csv(_) => 1,
        }
    }
}

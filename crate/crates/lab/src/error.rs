use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("invalid configuration ({}): {detail}", keys.join(", "))]
    Config { keys: Vec<String>, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] r3_core::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("non-finite loss at step {step}; batch dumped to {dump}")]
    NonFinite { step: u64, dump: PathBuf },
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: &str, detail: impl Into<String>) -> Self {
        Self::Config {
            keys: vec![key.to_string()],
            detail: detail.into(),
        }
    }

    /// Whether the error stems from invalid user input.
    pub fn is_validation(&self) -> bool {
        matches!(self, Self::Config { .. })
    }
}

pub type Result<T> = std::result::Result<T, LabError>;

use ndcore::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, DsuError>;

#[derive(Debug, Error)]
pub enum DsuError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("unknown domain `{0}`")]
    UnknownDomain(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DsuError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        DsuError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Validation failures are caller mistakes; everything else happened at run time.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            DsuError::Config(_) | DsuError::UnknownDomain(_) | DsuError::Json(_)
        )
    }
}

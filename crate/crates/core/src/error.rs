use thiserror::Error;

/// Errors raised by the estimation pipeline.
///
/// The variants map onto the CLI exit codes: validation problems with the
/// input, numerical failures during inference, and resource caps.
#[derive(Debug, Error)]
pub enum MuneError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("resource cap reached: {0}")]
    ResourceCap(String),

    /// A firing history with probability zero under the excitability posterior.
    #[error("excitability posterior annihilated: {0}")]
    Annihilated(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl MuneError {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        MuneError::Validation(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        MuneError::Numerical(msg.into())
    }

    /// Short machine-readable tag used in error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            MuneError::Validation(_) => "validation",
            MuneError::Numerical(_) => "numerical",
            MuneError::ResourceCap(_) => "resource_cap",
            MuneError::Annihilated(_) => "annihilated",
            MuneError::Io(_) => "io",
            MuneError::Csv(_) => "csv",
            MuneError::Json(_) => "json",
            MuneError::Config(_) => "config",
        }
    }
}

pub type Result<T, E = MuneError> = std::result::Result<T, E>;

use std::path::PathBuf;

use crate::policy::Role;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value violates its documented range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Logits, ratios, or parameters stopped being finite.
    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("policy for {expected:?} was asked to act as {actual:?}")]
    RoleMismatch { expected: Role, actual: Role },

    #[error("token {token} is outside the vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed metrics file {path}: {reason}")]
    Metrics { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure stems from the user's configuration rather than the run itself.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

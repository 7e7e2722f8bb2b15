use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] synthdyn_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{context}: {source}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },

    #[error("trajectory {source_id:?} has {found} steps but the model needs a context length of c = {needed} steps")]
    ContextTooShort { source_id: String, found: usize, needed: usize },

    #[error("{0}")]
    Format(String),

    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |source| Error::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn json(context: impl Into<String>) -> impl FnOnce(serde_json::Error) -> Error {
        let context = context.into();
        move |source| Error::Json { context, source }
    }

    /// Stable category name used in the machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(e) => match e {
                synthdyn_core::Error::TooShort { .. } => "too_short",
                synthdyn_core::Error::InvalidConfig(_) => "invalid_config",
                synthdyn_core::Error::DimensionMismatch { .. } | synthdyn_core::Error::Shape { .. } => "dimension",
                synthdyn_core::Error::NonFinite(_) | synthdyn_core::Error::BlowUp { .. } => "numerical",
                synthdyn_core::Error::InsufficientData { .. } | synthdyn_core::Error::Empty(_) => "insufficient_data",
                synthdyn_core::Error::Singular => "singular",
                _ => "core",
            },
            Error::Io { .. } => "io",
            Error::Json { .. } => "schema",
            Error::Csv { .. } => "csv",
            Error::ContextTooShort { .. } => "too_short",
            Error::Format(_) => "format",
            Error::Usage(_) => "usage",
        }
    }
}

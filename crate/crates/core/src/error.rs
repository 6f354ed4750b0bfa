use std::path::PathBuf;

/// Errors raised anywhere in the simulation, fitting and study pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input data failed a structural or range check.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A configuration file or combination of settings cannot be used.
    #[error("configuration error: {0}")]
    Config(String),

    /// A simulation or fitting step failed at runtime.
    #[error("runtime failure: {0}")]
    Runtime(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Error::Runtime(msg.into())
    }

    /// Whether this error stems from bad user input rather than a runtime fault.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Invalid(_) | Error::Config(_) | Error::Json { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

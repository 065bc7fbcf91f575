use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller supplied an argument outside the operation's contract.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A file did not match the documented container layout.
    #[error("format error in field `{field}`: {message}")]
    Format { field: String, message: String },

    /// Data parsed correctly but violates a domain invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A NaN or infinity showed up where finite values are required.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Models with a fixed-width head (No-Factor) cannot run on a different entity count.
    #[error("model was built for {expected} entities but got {got}; its fully connected head cannot adapt")]
    IncompatibleEntityCount { expected: usize, got: usize },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by parsing, feature assembly, training and scoring.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid UTF-8 at byte {position}")]
    InvalidUtf8 { position: usize },

    #[error("{message} at line {line}")]
    Format { line: usize, message: String },

    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unknown technique {0:?}")]
    UnknownTechnique(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("missing resource: {0}")]
    MissingResource(String),

    #[error("feature layout mismatch: model expects {expected}, got {found}")]
    LayoutMismatch { expected: String, found: String },

    #[error("training diverged (non-finite loss); last finite epoch {last_finite_epoch}")]
    Diverged { last_finite_epoch: usize },
}

impl Error {
    pub fn format(line: usize, message: impl Into<String>) -> Self {
        Error::Format {
            line,
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Error::Invalid(message.into())
    }

    /// Attach the file a parse error came from.
    pub fn in_file(self, path: impl Into<PathBuf>) -> Self {
        Error::InFile {
            path: path.into(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad user input rather than by the toolkit.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Diverged { .. } => false,
            Error::InFile { source, .. } => source.is_input_error(),
            _ => true,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

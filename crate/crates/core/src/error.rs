use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or parameter shapes do not line up.
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("loss must be a scalar node, found shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape is disconnected: {0}")]
    Disconnected(String),

    /// Two parameter collections (weights, anchors, Fisher values, gradients)
    /// do not share names and shapes.
    #[error("misaligned parameter sets: {0}")]
    Misaligned(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("parse error in {field} at byte offset {offset}: {message}")]
    Parse {
        field: String,
        offset: usize,
        message: String,
    },

    #[error("corrupt file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },

    #[error("missing prerequisite: expected {path} ({hint})")]
    MissingPrerequisite { path: PathBuf, hint: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("classifier accuracy {accuracy:.4} below required {threshold:.4} after {attempts} attempts")]
    WeakClassifier {
        accuracy: f64,
        threshold: f64,
        attempts: usize,
    },

    #[error("i/o error on {path}: {source}")]
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
    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], found: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
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

    /// True for errors caused by user input or configuration rather than a
    /// broken internal invariant.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::Config { .. }
                | Error::Parse { .. }
                | Error::Corrupt { .. }
                | Error::MissingPrerequisite { .. }
                | Error::WeakClassifier { .. }
                | Error::Io { .. }
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}

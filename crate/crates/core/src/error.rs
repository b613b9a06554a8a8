use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    /// A binary file or container failed to parse.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("invalid state: {0}")]
    State(String),

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("evaluation produced a non-finite value: {0}")]
    Evaluation(String),

    /// Training loss became NaN or infinite.
    #[error("non-finite loss {loss} at step {step} (batch {batch})")]
    Divergence { step: usize, batch: usize, loss: f64 },

    #[error("manifest references missing files: {}", .missing.join(", "))]
    Manifest { missing: Vec<String> },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::State(_) | Error::Vocab(_) => 2,
            Error::Format { .. } | Error::Manifest { .. } | Error::Json(_) | Error::Input(_) => 3,
            Error::Divergence { .. } | Error::Evaluation(_) => 4,
            Error::Shape { .. } | Error::Io { .. } => 1,
        }
    }
}

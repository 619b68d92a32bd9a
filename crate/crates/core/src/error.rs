use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },
    #[error("non-finite {what} at step {step}{}", checkpoint_note(.checkpoint))]
    NonFinite {
        what: String,
        step: u64,
        checkpoint: Option<PathBuf>,
    },
}

fn checkpoint_note(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => format!(" (last checkpoint: {})", p.display()),
        None => String::new(),
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

use std::path::Path;

use thiserror::Error;

use crate::train::RunRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("unknown topology `{name}`{}; valid names: {valid}", suggest_suffix(.suggestions))]
    Lookup {
        name: String,
        suggestions: Vec<String>,
        valid: String,
    },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}, batch {batch} (loss {loss})")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
        record: Box<RunRecord>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn suggest_suffix(suggestions: &[String]) -> String {
    if suggestions.is_empty() {
        String::new()
    } else {
        format!(" (did you mean {}?)", suggestions.join(", "))
    }
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Wraps an I/O failure with the path it concerns.
    pub fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        }
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}

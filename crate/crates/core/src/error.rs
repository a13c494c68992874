use alloc::boxed::Box;
use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("transport error contacting {endpoint} after {attempts} attempt(s): {message}")]
    Transport {
        endpoint: String,
        attempts: u32,
        message: String,
    },

    #[error("backend failure for persona {persona}, exemplar {exemplar}: {source}")]
    Pair {
        persona: usize,
        exemplar: usize,
        source: Box<Error>,
    },

    #[error("item {index} failed: {source}")]
    Item { index: usize, source: Box<Error> },

    #[error("non-finite {what} for record {record}")]
    Numerical { record: String, what: String },

    #[error("generation produced no text")]
    EmptyGeneration,
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn at_pair(self, persona: usize, exemplar: usize) -> Self {
        Error::Pair {
            persona,
            exemplar,
            source: Box::new(self),
        }
    }

    pub(crate) fn at_index(self, index: usize) -> Self {
        Error::Item {
            index,
            source: Box::new(self),
        }
    }

    /// True for failures worth retrying against the same backend.
    pub fn is_transient(&self) -> bool {
        match self {
            Error::Transport { .. } | Error::EmptyGeneration => true,
            Error::Pair { source, .. } | Error::Item { source, .. } => source.is_transient(),
            _ => false,
        }
    }
}

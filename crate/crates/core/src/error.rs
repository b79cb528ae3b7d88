use std::path::PathBuf;

/// Errors produced by the pipeline library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("input of {len} tokens exceeds the {max} available positions; truncate the context first")]
    TooLong { len: usize, max: usize },

    #[error("non-finite loss at step {step}; state restored to the last good parameters")]
    Diverged { step: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl std::fmt::Display) -> Self {
        Error::Parse { line, msg: msg.to_string() }
    }

    /// True for errors caused by bad input data rather than a failing computation.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. } | Error::File { .. } | Error::Checkpoint(_) | Error::Config(_)
        )
    }
}

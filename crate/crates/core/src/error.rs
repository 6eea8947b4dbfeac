use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("transcript too long: {tokens} tokens need at least {required} frames, got {frames}")]
    TranscriptTooLong {
        tokens: usize,
        required: usize,
        frames: usize,
    },

    #[error("format error in {}: {message} (byte offset {offset})", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("missing {kind}: {artifact} (run {stage})")]
    MissingArtifact {
        kind: &'static str,
        artifact: String,
        stage: String,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("test error: {0}")]
    Nondeterministic(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::MissingArtifact { .. } => 3,
            Error::Numerical(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

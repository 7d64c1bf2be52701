use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown channel {0}")]
    UnknownChannel(u8),

    #[error("insufficient duration: no complete window of {window_ps} ps fits")]
    InsufficientDuration { window_ps: u64 },

    #[error("insufficient counts: {0}")]
    InsufficientCounts(String),

    #[error("insufficient statistics: need at least {needed} events, got {got}")]
    InsufficientStatistics { needed: usize, got: usize },

    #[error("acquisition has no trigger events")]
    NoTriggers,

    #[error("empty channel: {0}")]
    EmptyChannel(String),

    #[error("invalid acquisition: {0}")]
    InvalidAcquisition(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("truncated binary data at byte offset {offset}: {msg}")]
    Truncated { offset: u64, msg: String },

    #[error("fit error: {0}")]
    Fit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

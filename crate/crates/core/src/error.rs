use std::io;

use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violates an operation's precondition.
    #[error("domain error: {0}")]
    Domain(String),
    /// Input bytes do not follow the expected file layout.
    #[error("format error: {0}")]
    Format(String),
    /// Two inputs that must agree do not.
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("partition error: {0}")]
    Partition(String),
    /// Not enough eligible clients remain to fill a round.
    #[error("selection error: {0}")]
    Selection(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

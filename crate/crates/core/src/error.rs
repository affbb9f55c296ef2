//! Error taxonomy shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum UcbError {
    /// A caller-supplied value is outside the operation's domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Array shapes or lengths do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// The operation was called in a state it does not support.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A file does not follow the expected layout (bad magic, bad version).
    #[error("format error: {0}")]
    Format(String),

    /// A file follows the layout but its content is damaged (truncation, CRC).
    #[error("corrupt data: {0}")]
    Corruption(String),

    /// Two inputs that must agree with each other do not.
    #[error("inconsistent data: {0}")]
    Inconsistency(String),

    /// A forward trace no longer matches the network it was recorded from.
    #[error("stale trace: {0}")]
    StaleTrace(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, UcbError>;

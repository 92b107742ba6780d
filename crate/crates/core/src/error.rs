use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, sizes, ranges).
    #[error("contract violation: {0}")]
    Contract(String),
    /// An input value lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Nothing to compute on, e.g. an all-invalid depth image.
    #[error("empty input: {0}")]
    Empty(String),
    /// The predicted freespace set is empty, so no camera height exists.
    #[error("no freespace pixels")]
    NoFreespace,
    /// A loss or gradient became non-finite.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(alloc::format!($($arg)*))
    };
}
pub(crate) use contract;

//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by policies, rewards, the RAFT loop and the harness.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument referenced something outside its domain (unknown prompt,
    /// malformed response, out-of-range index).
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value violates its invariants.
    #[error("config error: {0}")]
    Config(String),

    /// An operation that enumerates the response space was asked to run on a
    /// space above the enumeration cap.
    #[error("response space of size {size} exceeds enumeration cap {cap}")]
    SpaceTooLarge { size: u128, cap: usize },

    /// A fine-tuning stage received no data.
    #[error("empty batch: a stage must produce data")]
    EmptyBatch,

    /// The best-of-K concentration bound failed, which can only happen if an
    /// exact computation is wrong.
    #[error(
        "best-of-K bound violated at K={k}: mean={mean}, exact={exact}, upper={upper}"
    )]
    BoundViolated { k: usize, mean: f64, exact: f64, upper: f64 },

    /// Checkpoint or dataset files that cannot be parsed.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    /// Plot-data export found run directories without stage logs.
    #[error("missing stage logs for runs: {}", .0.join(", "))]
    MissingLogs(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}

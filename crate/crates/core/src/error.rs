//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An operation produced or received a NaN/Inf value.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Input is numerically degenerate (e.g. near-zero norm).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// An API contract was violated (missing gradients, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// A snapshot does not match the target network.
    #[error("snapshot error: {0}")]
    Snapshot(String),

    /// Checkpoint / dataset files are missing, corrupt or inconsistent.
    #[error("persistence error: {0}")]
    Persistence(String),

    /// The experiment protocol was violated (train/eval overlap, bad reference, ...).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// The current continuous batch cannot supply the requested tuples.
    #[error("stream starvation in batch {batch_index}: {reason}")]
    StreamStarvation { batch_index: usize, reason: String },
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Persistence(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Persistence(format!("json: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

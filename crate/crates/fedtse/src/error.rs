//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by network construction, training, transports and the
/// secure inner-product subprotocol.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or input file violated a stated invariant.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Vector or matrix dimensions do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A party received a message it cannot accept in its current state.
    #[error("protocol violation: {0}")]
    Protocol(String),

    /// Message delivery failed (connection loss, framing, serialization).
    #[error("transport failure: {0}")]
    Transport(String),

    /// The rank-condition defense refused a secure computation.
    #[error("rank guard refusal: {0}")]
    RankRefusal(String),

    /// Discrete-log recovery failed: the configured bound does not cover the
    /// actual inner product.
    #[error("secure inner product bound exceeded: {0}")]
    BoundExceeded(String),

    /// A value fell outside the fixed-point codec's encodable range.
    #[error("codec range: {0}")]
    CodecRange(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by model construction, learning runs, and the harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed model, policy, or configuration input.
    #[error("configuration error: {0}")]
    Config(String),

    /// An adversarial loss schedule was asked for an episode it does not cover.
    #[error("adversarial loss schedule exhausted: episode {episode} > schedule length {available}")]
    RunLength { episode: usize, available: usize },

    /// Visit statistics were fed episodes out of order.
    #[error("episodes must be recorded in strictly increasing order: got {got} after {last}")]
    OutOfOrderEpisode { got: usize, last: usize },

    /// A confidence set admits no valid transition row.
    #[error("confidence set inconsistency: {0}")]
    ConfidenceInconsistency(String),

    /// An iterative numerical routine failed to converge.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Unknown validation suite name.
    #[error("unknown suite `{name}`; available: {available}")]
    UnknownSuite { name: String, available: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

use crate::track::Violation;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid track: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("unknown track asset `{0}`")]
    UnknownAsset(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

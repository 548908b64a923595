use std::path::PathBuf;

use crate::pose::Similarity;
use crate::tinynet::Network;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// The best-effort transform is still returned so callers can decide
    /// whether to use it.
    #[error("degenerate alignment: {reason}")]
    AlignmentDegenerate {
        reason: String,
        best_effort: Box<Similarity>,
    },

    #[error("batch of {0} is too small for batch statistics in train mode")]
    BatchTooSmall(usize),

    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("update rejected: {0}")]
    UpdateRejected(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("supervision unavailable for sample {0}")]
    SupervisionUnavailable(String),

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged {
        epoch: usize,
        last_good: Box<Network>,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("inconsistent report: {0}")]
    Report(String),

    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("malformed data in {path}: {reason}")]
    Data { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Schema(_) => 2,
            Error::InvalidPose(_)
            | Error::AlignmentDegenerate { .. }
            | Error::SupervisionUnavailable(_)
            | Error::InsufficientData(_)
            | Error::Data { .. }
            | Error::Report(_)
            | Error::CorruptCheckpoint(_)
            | Error::BatchTooSmall(_)
            | Error::Sequencing(_)
            | Error::UpdateRejected(_)
            | Error::Io(_) => 3,
            Error::Dependency(_) | Error::IncompatibleCheckpoint(_) => 4,
            Error::TrainingDiverged { .. } => 5,
        }
    }
}

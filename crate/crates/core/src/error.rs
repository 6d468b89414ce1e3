use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("malformed {format} file at byte {offset}: {reason}")]
    Format {
        format: &'static str,
        offset: u64,
        reason: String,
    },

    #[error("frame alignment mismatch: {0}")]
    Alignment(String),

    #[error("length regulation produced no frames")]
    EmptyOutput,

    #[error("predicted {frames} frames exceeds the cap of {cap}")]
    RunawayDuration { frames: usize, cap: usize },

    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },

    #[error("frozen reference parameters changed during fine-tuning")]
    ReferenceMutated,

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(format: &'static str, offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            offset,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

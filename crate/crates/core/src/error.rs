use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("{0}: produced a non-finite value")]
    NonFinite(&'static str),

    #[error("{0}: input is empty")]
    Empty(&'static str),

    #[error("column `{column}`: unseen category `{value}`")]
    UnseenCategory { column: String, value: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("aggregation: upload {index} has shape {found:?}, expected {expected:?}")]
    UploadShape {
        index: usize,
        expected: Vec<(usize, usize)>,
        found: Vec<(usize, usize)>,
    },

    #[error("round {round}: only {live} live participants, need {needed}")]
    NotEnoughParticipants { round: usize, live: usize, needed: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

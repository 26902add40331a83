use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FrinetError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FrinetError {
    #[error("rotation angle {0} is not a multiple of 90 degrees")]
    InvalidAngle(i64),

    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no class of the {phase} split has at least {needed} usable images")]
    NoUsableClass { phase: &'static str, needed: usize },

    #[error("fold leakage: novel class {class_id} appears as a pretraining target")]
    FoldLeakage { class_id: u8 },

    #[error("backbone weights are not loaded")]
    WeightsNotLoaded,

    #[error("backbone mismatch: expected {expected}, found {found}")]
    BackboneMismatch { expected: String, found: String },

    #[error("non-finite values produced at stage `{0}`")]
    NonFinite(&'static str),

    #[error("ground truth mask contains no labelled pixels")]
    EmptyGroundTruth,

    #[error("no class accumulated a non-empty union")]
    EmptyAccumulator,

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged {
        epoch: usize,
        loss: f64,
        last_good: Option<Box<crate::engine::Checkpoint>>,
    },

    #[error("comparison arms disagree on {0}")]
    MismatchedArms(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FrinetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FrinetError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        FrinetError::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

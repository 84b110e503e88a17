use std::path::PathBuf;

use maskplan_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("task {task} has {available} actions but plans need {required} distinct steps")]
    InsufficientActions {
        task: usize,
        available: usize,
        required: usize,
    },
    #[error("split ratio {ratio} leaves the {side} side empty ({videos} videos)")]
    EmptySplit {
        ratio: f64,
        side: &'static str,
        videos: usize,
    },
    #[error("task {0} has no actions in the training data")]
    EmptyTaskMask(usize),
    #[error("task posterior must be a probability vector (sum {sum})")]
    InvalidPosterior { sum: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("training diverged at step {step}: loss {loss}, lr {lr}")]
    Diverged { step: u64, loss: f64, lr: f64 },
    #[error("instance from video {video_id} is tagged as test data")]
    TestDataInTraining { video_id: usize },
    #[error("no {0} provided")]
    Missing(&'static str),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

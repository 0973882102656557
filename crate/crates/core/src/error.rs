use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("failed to parse configuration: {0}")]
    ConfigParse(String),

    #[error("load error in {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("invalid prompt: {0}")]
    Prompt(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("text encoder: {0}")]
    Text(String),

    #[error("lora: {0}")]
    Lora(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training: {0}")]
    Training(String),

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("degenerate paired test: {0}")]
    DegenerateTest(String),

    #[error("report: {0}")]
    Report(String),

    #[error("ablation: {0}")]
    Ablation(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

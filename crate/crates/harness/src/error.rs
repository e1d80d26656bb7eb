use std::path::PathBuf;

use multideriv_core::eval::EvalError;
use multideriv_core::model::ModelError;
use multideriv_core::preprocess::PreprocessError;
use multideriv_core::render::RenderError;
use multideriv_core::train::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Stable machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Io { .. } => "IoError",
            Self::Format { .. } => "FormatError",
            Self::Config(_) => "ConfigError",
            Self::Render(RenderError::InvalidRange(_)) => "InvalidRange",
            Self::Render(_) => "RenderError",
            Self::Preprocess(_) => "PreprocessError",
            Self::Model(ModelError::ShapeMismatch(_)) | Self::Eval(EvalError::Model(ModelError::ShapeMismatch(_))) => {
                "ShapeMismatch"
            }
            Self::Model(_) => "ModelError",
            Self::Train(TrainError::EmptyDataset) => "EmptyDataset",
            Self::Train(TrainError::NonFiniteLoss { .. }) => "NonFiniteLoss",
            Self::Train(_) => "TrainError",
            Self::Eval(_) => "EvalError",
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() })
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    /// A density or objective evaluated to a non-finite value.
    #[error("non-finite value: {message}")]
    NonFinite { message: String, at: Vec<f64> },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize, last_finite: Vec<f64> },

    #[error("sampler stuck: {consecutive} consecutive rejections")]
    SamplerStuck { consecutive: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("column `{0}` has zero variance")]
    ConstantColumn(String),

    #[error("bad file format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed in trial {trial}: {source}")]
    Stage {
        stage: &'static str,
        trial: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: msg.into(),
        }
    }
}

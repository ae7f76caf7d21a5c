//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid geometry: {0}")]
    Geometry(String),

    #[error("invalid field: {0}")]
    Field(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid synthetic-data parameters: {0}")]
    SynthParams(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("dataset variable `{variable}`: {message}")]
    DatasetVariable { variable: String, message: String },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("netcdf error: {0}")]
    NetCdf(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

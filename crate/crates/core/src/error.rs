use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid band: {0}")]
    InvalidBand(String),

    #[error("invalid window: {0}")]
    InvalidWindow(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("near-singular decay rates: {0}")]
    NearSingular(String),

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("unknown position id `{0}`")]
    Lookup(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

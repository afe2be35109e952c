use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest row {row}: {message}")]
    MalformedRow { row: usize, message: String },

    #[error("duplicate image id `{0}`")]
    DuplicateId(String),

    #[error("image `{id}`: mos {mos} outside [{min}, {max}]")]
    MosOutOfRange { id: String, mos: f64, min: f64, max: f64 },

    #[error("unknown image id `{0}`")]
    UnknownId(String),

    #[error("image `{0}` has no mos")]
    MissingMos(String),

    #[error("image `{0}` has no score")]
    MissingScore(String),

    #[error("non-finite value: {0}")]
    NonFinite(f64),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("failed to converge: {0}")]
    NotConverged(String),

    #[error("no recorded trial for presentation ({first}, {second})")]
    MissingTrial { first: String, second: String },

    #[error("session mismatch: {0}")]
    SessionMismatch(String),

    #[error("session aborted: {0}")]
    Aborted(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

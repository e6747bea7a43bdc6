use std::path::PathBuf;

use thiserror::Error;

use crate::gateway::GatewayError;
use crate::model::{Channel, Space};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("schema error in record `{id}`, field `{field}`: {message}")]
    Schema {
        id: String,
        field: String,
        message: String,
    },

    #[error("duplicate question id `{0}`")]
    DuplicateId(String),

    #[error("rationale file not found: {0}")]
    MissingRationaleFile(PathBuf),

    #[error("embedding format error: {0}")]
    Format(String),

    #[error("dimension mismatch ({context}): expected {expected}, found {found}")]
    DimMismatch {
        expected: usize,
        found: usize,
        context: String,
    },

    #[error("row `{id}` has norm {norm}, outside the accepted band [0.99, 1.01]")]
    Norm { id: String, norm: f64 },

    #[error("zero vector for `{id}`")]
    ZeroVector { id: String },

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("question `{id}` has no image but channel {channel} queries by image")]
    MissingImage { id: String, channel: Channel },

    #[error("no embedding for `{id}` in space {space}")]
    MissingEmbedding { id: String, space: Space },

    #[error("no strategy for dataset kind `{0}`")]
    UnknownDataset(String),

    #[error("demonstration `{0}` has no rationale")]
    MissingRationale(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(id: &str, field: &str, message: impl Into<String>) -> Self {
        Error::Schema {
            id: id.to_string(),
            field: field.to_string(),
            message: message.into(),
        }
    }
}

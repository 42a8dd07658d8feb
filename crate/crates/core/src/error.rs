use std::path::PathBuf;

use thiserror::Error;

use crate::trainer::Checkpoint;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("unknown entity `{0}`")]
    UnknownEntity(String),

    #[error("unknown relation `{0}`")]
    UnknownRelation(String),

    #[error("entity id {0} out of range")]
    EntityOutOfRange(u32),

    #[error("feature file has no row for entity `{0}`")]
    MissingFeature(String),

    #[error("feature dimension mismatch: {0}")]
    FeatureDims(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("illegal action: {0}")]
    IllegalAction(String),

    #[error("could not reach target fraction: {0}")]
    SplitFailed(String),

    #[error("infeasible planted graph: {0}")]
    Infeasible(String),

    #[error("invalid config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown ablation variant `{0}`")]
    UnknownVariant(String),

    #[error("non-finite value at epoch {epoch}: {what}")]
    Diverged {
        epoch: usize,
        what: String,
        last_good: Box<Checkpoint>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

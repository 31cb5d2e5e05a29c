use std::path::PathBuf;

use thiserror::Error;

use crate::backends::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template {0:?} has no {{X}} placeholder")]
    MissingSubject(String),
    #[error("template {0:?} contains {{Y}} but no object was given")]
    MissingObject(String),
    #[error("an object was given but template {0:?} has no {{Y}} placeholder")]
    UnexpectedObject(String),
    #[error("template {template:?} contains unknown placeholder {{{name}}}")]
    Unresolved { template: String, name: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Template(#[from] TemplateError),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("relation config: {0}")]
    Registry(String),

    #[error("relation {relation}: invalid field `{field}`: {reason}")]
    Schema {
        relation: String,
        field: &'static str,
        reason: String,
    },

    #[error("unknown relation {0:?}")]
    UnknownRelation(String),

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("retrieval failed for query {query:?}: {source}")]
    Retrieval {
        query: String,
        #[source]
        source: BackendError,
    },

    #[error("calibration: {0}")]
    Calibration(String),

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SencaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SencaError {
    #[error("shape error in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("inconsistent inputs: {0}")]
    Consistency(String),

    #[error("empty result: {0}")]
    EmptyResult(String),

    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("{op} expects stage {expected}, found {found}")]
    Stage {
        op: &'static str,
        expected: &'static str,
        found: &'static str,
    },

    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFinite { epoch: usize, detail: String },

    #[error("invalid synthetic spec: {0}")]
    Spec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SencaError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        SencaError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SencaError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        SencaError::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}

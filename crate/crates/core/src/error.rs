use std::path::PathBuf;

use thiserror::Error;
use vf_tensor::TensorError;

#[derive(Debug, Error)]
pub enum VfError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("{path}: format error at byte {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: usize,
        msg: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite {
        what: String,
        epoch: usize,
        step: usize,
    },
    #[error("checkpoint version error: {0}")]
    Version(String),
    #[error("dataset incomplete, missing: {}", list_paths(.0))]
    MissingData(Vec<PathBuf>),
}

fn list_paths(p: &[PathBuf]) -> String {
    p.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
}

impl VfError {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        VfError::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VfError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 for usage/configuration problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            VfError::Config { .. }
            | VfError::Parse { .. }
            | VfError::MissingData(_)
            | VfError::Version(_) => 1,
            VfError::Tensor(TensorError::Config { .. } | TensorError::Usage(_)) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, VfError>;

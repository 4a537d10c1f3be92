use std::path::PathBuf;

use thiserror::Error;
use varred_gp::GpError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Input(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Gp(#[from] GpError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    /// 1 for bad input or I/O, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Numerical(_) => 2,
            HarnessError::Gp(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(HarnessError::Input(msg.into()))
}

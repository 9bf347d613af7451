use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at episode {episode}: {detail}")]
    TrainingDiverged { episode: usize, detail: String },

    #[error("stale sample bank: collected under policy {bank}, asked to evaluate against {policy}")]
    StaleBank { bank: String, policy: String },

    #[error("sample bank has no samples for mode `{0}` which has positive belief")]
    BankCoverage(String),

    #[error("{path}: expected {expected}, found {found}")]
    VersionMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{path}: corrupt file: {detail}")]
    Corrupt { path: PathBuf, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for errors caused by bad inputs rather than by a failing run.
    pub fn is_configuration(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Usage(_)
                | Error::VersionMismatch { .. }
                | Error::Corrupt { .. }
                | Error::BankCoverage(_)
                | Error::StaleBank { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, detail: impl ToString) -> Self {
        Error::Corrupt {
            path: path.into(),
            detail: detail.to_string(),
        }
    }
}

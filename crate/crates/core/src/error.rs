use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("configuration error at {key}{}: {detail}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    ConfigKey {
        key: String,
        line: Option<usize>,
        detail: String,
    },

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("statistics error: {0}")]
    Statistics(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error in {}: {detail} (byte offset {offset})", path.display())]
    Parse {
        path: PathBuf,
        offset: usize,
        detail: String,
    },

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("mode error: {0}")]
    Mode(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Validation failures map to exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::ConfigKey { .. }
                | Error::Resolution(_)
                | Error::Mode(_)
                | Error::Contract(_)
                | Error::Dimension { .. }
        )
    }
}

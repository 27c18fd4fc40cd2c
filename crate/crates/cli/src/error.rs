use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] preimage::Error),
    #[error("cannot read image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("cannot read {path}: {reason}")]
    Input { path: PathBuf, reason: String },
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Conflict(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn conflict(msg: impl Into<String>) -> Self {
        Self::Conflict(msg.into())
    }

    /// Process exit status. Usage errors from argument parsing exit with 2.
    pub fn exit_code(&self) -> i32 {
        use preimage::Error as E;
        match self {
            Self::Core(e) => match e {
                E::UnknownLayer { .. } => 3,
                E::Io(_) => 4,
                E::Config(_) | E::Shape(_) => 5,
                E::DegenerateTarget(_) => 6,
                E::Bounds(_) => 7,
                E::NonFinite { .. } => 8,
                E::Manifest(_) | E::Corrupt(_) | E::UnsupportedKind { .. } => 9,
            },
            Self::Image { .. } | Self::Input { .. } | Self::Output { .. } => 4,
            Self::Conflict(_) => 5,
        }
    }
}

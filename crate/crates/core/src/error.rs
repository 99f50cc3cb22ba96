use std::path::PathBuf;

use crate::datamodel::ConfigViolation;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: parse error: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("video {id:?}: field `{field}`: {reason}")]
    Malformed {
        id: String,
        field: &'static str,
        reason: String,
    },

    #[error("invalid configuration: {}", format_violations(.0))]
    InvalidConfig(Vec<ConfigViolation>),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown video id {0:?}")]
    UnknownVideo(String),

    #[error("tensor container {path}: {reason}")]
    Container { path: PathBuf, reason: String },

    #[error("stage order: {0}")]
    StageOrder(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
}

fn format_violations(v: &[ConfigViolation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure stems from user input rather than a runtime fault.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Self::Malformed { .. }
                | Self::InvalidConfig(_)
                | Self::Invalid(_)
                | Self::UnknownVideo(_)
                | Self::Parse { .. }
                | Self::StageOrder(_)
        )
    }
}

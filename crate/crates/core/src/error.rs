use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Arguments outside the operation's domain (time ordering, non-finite input, t >= T).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Non-finite activation produced by a policy layer.
    #[error("non-finite activation in policy layer {layer}")]
    NonFinite { layer: usize },

    #[error("simulation diverged at step {step}{}", path.map(|p| format!(" (path {p})")).unwrap_or_default())]
    Diverged { step: usize, path: Option<usize> },

    /// A caller broke an interface contract (missing tape data, omitted Z where required, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training aborted: {skipped} of {attempted} iterations skipped after divergence")]
    TrainingAborted { skipped: usize, attempted: usize },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Re-root a config error under `prefix`; other errors become config
    /// errors at `prefix`.
    pub(crate) fn nested(self, prefix: &str) -> Self {
        match self {
            Error::Config { path, message } => Error::config(format!("{prefix}.{path}"), message),
            other => Error::config(prefix, other.to_string()),
        }
    }

    /// Attach a path index to a divergence error raised inside a batch.
    pub fn with_path(self, index: usize) -> Self {
        match self {
            Error::Diverged { step, .. } => Error::Diverged {
                step,
                path: Some(index),
            },
            other => other,
        }
    }
}

use std::path::PathBuf;

/// Errors produced anywhere in the engine or harness.
///
/// Variants split into two families: configuration errors (bad shapes,
/// invalid parameters, malformed config files) and runtime errors (I/O,
/// numerically undefined results). The CLI maps them to exit codes 1 and 2.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid config at `{path}`: {message}")]
    ConfigAt { path: String, message: String },

    #[error("row {row} is fully masked; softmax is undefined")]
    FullyMaskedRow { row: usize },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("{0}")]
    Runtime(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by invalid input configuration rather than a
    /// failure while running.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Shape { .. } | Error::Config(_) | Error::ConfigAt { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

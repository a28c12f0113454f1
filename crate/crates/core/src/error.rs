use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("orphan regions at granularity {granularity} (no overlap with the coarser level): {ids:?}")]
    Orphan { granularity: usize, ids: Vec<usize> },

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command line front end:
    /// 1 usage/config, 2 data validation, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::State(_) => 1,
            Error::NonFinite(_) | Error::Training(_) => 3,
            Error::Parse { .. }
            | Error::Schema(_)
            | Error::Orphan { .. }
            | Error::Degenerate(_)
            | Error::Dimension { .. }
            | Error::Label(_)
            | Error::Io { .. }
            | Error::Csv(_)
            | Error::Json(_) => 2,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HierarqError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HierarqError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("out-of-order frame: expected index {expected}, got {got}")]
    Sequencing { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HierarqError {
    /// Short machine-readable category used on the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            HierarqError::Dimension { .. } => "dimension",
            HierarqError::Config(_) => "config",
            HierarqError::NonFinite(_) => "non_finite",
            HierarqError::Precondition(_) => "precondition",
            HierarqError::Sequencing { .. } => "sequencing",
            HierarqError::Input(_) => "input",
            HierarqError::Format { .. } => "format",
            HierarqError::Numerical(_) => "numerical",
            HierarqError::Io { .. } => "io",
            HierarqError::Json(_) => "json",
        }
    }

    /// Process exit code: 1 for input/config problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HierarqError::NonFinite(_) | HierarqError::Numerical(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        HierarqError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HierarqError::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum DnaError {
    /// A configuration value or hierarchy spec violates a documented constraint.
    #[error("invalid config: {0}")]
    Config(String),

    /// A required configuration key was not present.
    #[error("missing config key `{0}`")]
    MissingKey(String),

    /// Shapes, indices or labels do not fit together.
    #[error("structural error: {0}")]
    Structural(String),

    /// A computation produced (or was fed) a non-finite or degenerate value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A text file could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DnaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DnaError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        DnaError::Parse {
            line,
            message: message.into(),
        }
    }

    /// Short machine-readable category, used in structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            DnaError::Config(_) => "config",
            DnaError::MissingKey(_) => "missing_key",
            DnaError::Structural(_) => "structural",
            DnaError::Numeric(_) => "numeric",
            DnaError::Parse { .. } => "parse",
            DnaError::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = DnaError> = std::result::Result<T, E>;

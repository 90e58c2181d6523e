//! Crate-wide error type.

use std::path::PathBuf;

/// Errors surfaced by the pipeline.
///
/// Validation problems name the offending record or line so a user can
/// fix the input; missing upstream artifacts carry the path plus the
/// command that would produce it.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path} (line {line}, column {column}): {message}")]
    Json {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("validation failure{}: {message}", context_suffix(.context))]
    Validation {
        /// Record or entity the failure refers to, e.g. a question id.
        context: Option<String>,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("missing upstream artifact {path}; {remedy}")]
    MissingArtifact { path: PathBuf, remedy: String },

    #[error("knowledge cache corrupt at {path} line {line}: {message}")]
    CacheCorrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("service error: {0}")]
    Service(String),
}

fn context_suffix(context: &Option<String>) -> String {
    match context {
        Some(c) => format!(" ({c})"),
        None => String::new(),
    }
}

impl Error {
    /// Shorthand for a validation error without record context.
    pub fn validation(message: impl Into<String>) -> Self {
        Error::Validation {
            context: None,
            message: message.into(),
        }
    }

    /// Shorthand for a validation error naming the offending record.
    pub fn validation_at(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            context: Some(context.into()),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, err: &serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }

    /// Process exit code for the CLI: validation and configuration
    /// problems exit 2, missing upstream artifacts exit 3, everything
    /// else exits 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation { .. } | Error::Config(_) | Error::Json { .. } => 2,
            Error::MissingArtifact { .. } => 3,
            _ => 1,
        }
    }
}

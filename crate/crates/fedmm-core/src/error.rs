//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input row; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: String,
        expected: String,
        found: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    /// An operation tried to move local-only state across the federation
    /// boundary (local codebooks, residuals, embeddings, raw data).
    #[error("privacy wall violation: {0}")]
    PrivacyWall(String),

    #[error("missing upstream artifact: run `{required}` first ({detail})")]
    MissingArtifact { required: String, detail: String },

    /// Zero-norm vectors, collapsed codewords, and similar degenerate inputs.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value in {context}: {detail}")]
    NonFinite { context: String, detail: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("single-class data: {0}")]
    SingleClass(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by user-supplied configuration rather than
    /// runtime state; the CLI maps these to a distinct exit code.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

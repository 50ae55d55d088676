use thiserror::Error;

use crate::tensor::ModeLabel;

pub type Result<T> = std::result::Result<T, PbpError>;

#[derive(Debug, Error)]
pub enum PbpError {
    #[error("duplicate mode label {0}")]
    DuplicateMode(ModeLabel),

    #[error("tensor has no mode {0}")]
    MissingMode(ModeLabel),

    #[error("extent mismatch on mode {label}: {left} vs {right}")]
    ExtentMismatch {
        label: ModeLabel,
        left: usize,
        right: usize,
    },

    #[error("mode sets differ: {0}")]
    ModeMismatch(String),

    #[error("tensor contains non-finite entries")]
    NonFinite,

    #[error("invalid tensor shape: {0}")]
    Shape(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("graph contains a cycle through variable {0}")]
    Cyclic(String),

    #[error("joint state space of {states} exceeds cap {cap}")]
    CapExceeded { states: u128, cap: u128 },

    #[error("evidence has zero probability")]
    ZeroEvidence,

    #[error("singular regression design{}", .separator.map(|s| format!(" at separator {s}")).unwrap_or_default())]
    Singular { separator: Option<usize> },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parameters were learned on tree {expected}, rebuilt tree hashes to {found}")]
    TreeHashMismatch { expected: String, found: String },

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl PbpError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            PbpError::ZeroEvidence | PbpError::Singular { .. } | PbpError::NonFinite => 3,
            PbpError::Internal(_) => 1,
            _ => 2,
        }
    }
}

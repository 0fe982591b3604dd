//! Experiment harness around `fsd-core`: corpus and config file formats,
//! the newline-delimited JSON logit-server protocol, threshold and
//! candidate-length tuning procedures, sweep execution, and report
//! emission.

pub mod config;
pub mod corpus;
pub mod echo;
pub mod remote;
pub mod sweep;
pub mod tuning;
pub mod verify;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("token {token} out of range for vocab of {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },
    #[error("request timed out after {ms} ms")]
    Timeout { ms: u64 },
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("vocab mismatch: expected {expected}, remote declared {actual}")]
    VocabMismatch { expected: usize, actual: usize },
    #[error("corpus too small: need {needed} prompts in split '{split}', have {have}")]
    InsufficientCorpus {
        needed: usize,
        have: usize,
        split: String,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] fsd_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

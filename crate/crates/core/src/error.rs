use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read interactions from {path}: {source}")]
    Ingest { path: PathBuf, source: io::Error },

    #[error("dataset vanished under k-core (k = {k})")]
    EmptyAfterKCore { k: usize },

    #[error("invalid k-core threshold {0}; k must be at least 1")]
    InvalidKCore(usize),

    #[error("user {user} has {count} interactions; at least 3 are needed to split")]
    TooFewInteractions { user: String, count: usize },

    #[error("incompatible dataset file: {0}")]
    IncompatibleDataset(String),

    #[error("incompatible checkpoint file: {0}")]
    IncompatibleCheckpoint(String),

    #[error("checkpoint/dataset mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite controller input at node {node}")]
    NonFiniteInput { node: usize },

    #[error("ODE diverged at step {step}")]
    Diverged { step: usize },

    #[error("solve trace does not match solver: {0}")]
    TraceMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("negative sampling exhausted retries for user {user}")]
    NegativeSampling { user: usize },

    #[error("non-finite {what} during training (epoch {epoch}, step {step})")]
    NonFiniteTraining {
        what: &'static str,
        epoch: usize,
        step: usize,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

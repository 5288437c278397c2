//! Harness-level error type.

use crate::checkpoint::CheckpointError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] scarfnet_core::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("config: {0}")]
    Config(String),
    #[error(
        "loss diverged at iteration {iteration} (lr {lr}): cls {loss_cls}, reg {loss_reg}"
    )]
    Diverged {
        iteration: u64,
        lr: f32,
        loss_cls: f64,
        loss_reg: f64,
    },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

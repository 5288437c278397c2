//! Benchmark harness around the fusion networks: synthetic scenes,
//! training, evaluation, ablation sweeps, heatmaps and checkpoints.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod model;
pub mod pnm;
pub mod train;
pub mod viz;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::{SgdSettings, TrainConfig};
pub use error::{HarnessError, Result};

//! Interpolant schedules, the MLP velocity field, and flow-matching
//! pretraining.

mod model;
mod schedule;
mod train;

pub use model::{
    AffineLayer, LowRankAdapter, ModelBinding, ModelConfig, ModelPair, Trainable, VelocityModel,
};
pub use schedule::{path_point, Schedule};
pub use train::{
    draw_time, fm_loss, fm_loss_value, pretrain, LrSchedule, PretrainConfig, DEFAULT_TIME_CLAMP,
};

use thiserror::Error;

use crate::diffcore::DiffError;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("model: {0}")]
    BadModel(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

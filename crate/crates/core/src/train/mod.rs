//! AdamW optimisation with a warm-up/cosine schedule, the per-step training
//! procedure, checkpoints, and the epoch loop.

mod checkpoint;
mod config;
mod fit;
mod optim;
mod schedule;
mod step;

pub use checkpoint::{load_checkpoint, load_params, save_checkpoint, CheckpointMeta, INDEX};
pub use config::TrainConfig;
pub use fit::{fit, EpochLog, FitSummary, StepLog, BEST_DIR, CONFIG_FILE, EPOCH_LOG, LAST_DIR, STEP_LOG};
pub use optim::{adamw_step, clip_grad_norm, global_norm, AdamWConfig, Grads, OptimState};
pub use schedule::{lr_schedule, FLOOR_FRACTION, WARMUP_FRACTION};
pub use step::{global_embeddings, record_losses, TrainState};

use std::path::{Path, PathBuf};

use crate::data::DataError;
use crate::diffcore::DiffError;
use crate::encoders::EncoderError;
use crate::eval::EvalError;
use crate::losses::LossError;
use crate::momentum::MomentumError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {0}; step aborted")]
    NonFinite(String),
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Momentum(#[from] MomentumError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io { path: path.to_path_buf(), source }
    }
}

//! Opposition grouping and the two training phases: positive-only
//! pretraining of the whole model, then grouped fine-tuning of the tagged
//! modules with the PNC and TSO terms added.

mod checkpoint;
mod config;
mod groups;
#[cfg(test)]
mod tests;
mod train;
#[cfg(test)]
use train::group_loss;

use thiserror::Error;

use crate::diffcore::container::ContainerError;
use crate::diffcore::DiffError;
use crate::losses::LossError;
use crate::model::ModelError;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, RngState};
pub use config::{Phase, PncFeatures, TrainConfig, CONFIG_KEYS};
pub use groups::{build_groups, OppositionGroup, Prompt, TsoRole};
pub use train::{finetune_gobl, pretrain_positive, TrainStats};

#[derive(Debug, Error)]
pub enum GoblError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid training data: {0}")]
    Data(String),
    #[error("no valid opposition group for {0}")]
    NoGroups(String),
    #[error("non-finite loss at step {step}")]
    Divergence { step: u64 },
    #[error("parameters tagged {0} changed while frozen")]
    FrozenViolation(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

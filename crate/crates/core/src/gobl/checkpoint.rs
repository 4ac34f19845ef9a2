use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Phase, TrainConfig};
use super::GoblError;
use crate::diffcore::container::{decode, encode};
use crate::diffcore::ParamRegistry;
use crate::model::ModelConfig;

/// Serialized position of the trainer's ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte seed.
    pub seed: String,
    /// Word position as a decimal string (it is a u128).
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: Phase,
    pub step: u64,
    pub config_hash: String,
    pub rng_state: RngState,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub registry: ParamRegistry,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode(
            &self.registry,
            serde_json::to_value(&self.meta).expect("metadata serializes"),
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GoblError> {
        let (registry, meta) = decode(bytes)?;
        let meta: CheckpointMeta =
            serde_json::from_value(meta).map_err(|e| GoblError::Checkpoint(format!("metadata: {e}")))?;
        Ok(Self { registry, meta })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), GoblError> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| GoblError::Io(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, GoblError> {
    let bytes = std::fs::read(path).map_err(|e| GoblError::Io(format!("{}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}

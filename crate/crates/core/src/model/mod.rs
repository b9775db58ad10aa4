//! Tiny decoder-only transformer language model, its checkpoints, and the
//! frozen reference snapshot used as the KL anchor.

mod checkpoint;
mod config;
mod params;
mod transformer;

pub use checkpoint::{
    checkpoint_paths, load_checkpoint, save_checkpoint, to_storage_precision, CheckpointManifest, TensorEntry,
    CHECKPOINT_FORMAT,
};
pub use config::{ModelConfig, MIN_VOCAB};
pub use params::{Gradients, ParameterSet, INIT_STD};
pub use transformer::{backward, forward, logits, next_token_logits, Decoder, ForwardPass, TokenId};

use crate::error::Result;
use crate::numerics::Tensor;

/// Immutable deep copy of a policy taken before fine-tuning starts.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    params: ParameterSet,
}

impl ReferenceModel {
    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    /// `[B × L × V]` reference logits; never carries gradient.
    pub fn logits(&self, batch: &[Vec<TokenId>]) -> Result<Tensor> {
        logits(&self.params, batch)
    }
}

/// Deep-copies `params` into a frozen reference model.
pub fn snapshot_reference(params: &ParameterSet) -> ReferenceModel {
    ReferenceModel { params: params.clone() }
}

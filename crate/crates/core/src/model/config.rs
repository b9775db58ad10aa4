use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Number of reserved special tokens every vocabulary must hold.
pub const MIN_VOCAB: usize = 8;

/// Shape hyperparameters of the decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            context_len: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < MIN_VOCAB {
            return Err(Error::Config(format!(
                "vocab_size {} is below the minimum of {MIN_VOCAB}",
                self.vocab_size
            )));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.context_len == 0 {
            return Err(Error::Config(
                "d_model, n_layers, n_heads and context_len must be positive".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.d_model
    }

    /// Hex SHA-256 prefix of the canonical JSON encoding of the config.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divisibility_and_vocab_checks() {
        let bad = ModelConfig {
            d_model: 63,
            n_heads: 2,
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let tiny = ModelConfig {
            vocab_size: 7,
            ..ModelConfig::default()
        };
        assert!(tiny.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn hash_depends_on_every_field() {
        let a = ModelConfig::default();
        let b = ModelConfig { seed: 1, ..a.clone() };
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash(), ModelConfig::default().config_hash());
    }
}

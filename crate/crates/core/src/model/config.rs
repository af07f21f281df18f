use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture hyper-parameters shared by the base, side and gate networks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Side width is `d_model / side_reduction`.
    pub side_reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size: crate::train::VOCAB_SIZE,
            max_seq_len: 128,
            side_reduction: 8,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by the test suites.
    pub fn toy() -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            vocab_size: crate::train::VOCAB_SIZE,
            max_seq_len: 64,
            side_reduction: 4,
        }
    }

    pub fn side_width(&self) -> usize {
        self.d_model / self.side_reduction
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.n_layers < 1 {
            return bad("n_layers must be at least 1");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.side_reduction == 0 || !self.d_model.is_multiple_of(self.side_reduction) {
            return bad("d_model must be divisible by side_reduction");
        }
        if self.d_ff == 0 || self.max_seq_len == 0 {
            return bad("d_ff and max_seq_len must be positive");
        }
        Ok(())
    }

    /// Canonical JSON text (sorted keys, no whitespace).
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        serde_json::to_string(&value).expect("value serialises")
    }
}

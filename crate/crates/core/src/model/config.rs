use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Architecture and seed of the toy MoE transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub n_experts: usize,
    pub top_k_gate: usize,
    /// Length of the learned absolute position table.
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            n_layers: 6,
            n_heads: 4,
            d_ffn: 128,
            n_experts: 8,
            top_k_gate: 2,
            max_seq_len: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("n_experts", self.n_experts),
            ("top_k_gate", self.top_k_gate),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.top_k_gate > self.n_experts {
            return Err(Error::Config(format!(
                "top_k_gate {} exceeds n_experts {}",
                self.top_k_gate, self.n_experts
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameters in one SwiGLU expert.
    pub fn expert_params(&self) -> usize {
        3 * self.d_model * self.d_ffn
    }

    /// Canonical JSON: fields in declaration order, no whitespace.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{ContainerError, Result};

/// Architecture hyperparameters of an encoder.
///
/// `num_heads` and `ffn_neurons` describe the unpruned architecture; a pruned
/// model carries its actual per-layer unit counts in its layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ffn_neurons: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub layernorm_eps: f64,
    /// Sequence length the FLOPs accounting is evaluated at.
    pub avg_seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("ffn_neurons", self.ffn_neurons),
            ("embed_dim", self.embed_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("num_classes", self.num_classes),
            ("avg_seq_len", self.avg_seq_len),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(ContainerError::Validation(format!("{name} must be >= 1")).into());
            }
        }
        if self.avg_seq_len > self.max_seq_len {
            return Err(ContainerError::Validation(format!(
                "avg_seq_len {} exceeds max_seq_len {}",
                self.avg_seq_len, self.max_seq_len
            ))
            .into());
        }
        if !(self.layernorm_eps.is_finite() && self.layernorm_eps > 0.0) {
            return Err(ContainerError::Validation(format!(
                "layernorm_eps must be positive, got {}",
                self.layernorm_eps
            ))
            .into());
        }
        Ok(())
    }

    /// Number of sub-layers (one MHA and one FFN per layer).
    pub fn num_sublayers(&self) -> usize {
        2 * self.num_layers
    }
}

//! FLOPs accounting. One multiply-add counts as 2 FLOPs; everything is
//! evaluated at the configured average sequence length `s`.

use super::{EncoderModel, MaskState, ModelConfig};

/// FLOPs of one attention head: Q/K/V projections, scores, weighted sum and
/// output projection. Softmax is not counted.
pub fn flops_per_head(config: &ModelConfig) -> u64 {
    let s = config.avg_seq_len as u64;
    let d = config.embed_dim as u64;
    let dh = config.head_dim as u64;
    2 * s * d * dh * 3 + 2 * s * s * dh + 2 * s * s * dh + 2 * s * dh * d
}

/// FLOPs of one FFN neuron: input row, activation (`s`), output column.
pub fn flops_per_neuron(config: &ModelConfig) -> u64 {
    let s = config.avg_seq_len as u64;
    let d = config.embed_dim as u64;
    2 * s * d + s + 2 * s * d
}

/// FLOPs of units with a nonzero mask.
pub fn prunable_flops(model: &EncoderModel, masks: &MaskState) -> u64 {
    let (heads, neurons) = masks.surviving();
    heads as u64 * flops_per_head(&model.config) + neurons as u64 * flops_per_neuron(&model.config)
}

/// FLOPs of every head and neuron present in the model.
pub fn model_prunable_flops(model: &EncoderModel) -> u64 {
    let heads: usize = model.heads_per_layer().iter().sum();
    let neurons: usize = model.neurons_per_layer().iter().sum();
    heads as u64 * flops_per_head(&model.config) + neurons as u64 * flops_per_neuron(&model.config)
}

/// Prunable FLOPs plus the task head on the pooled token, for reporting.
pub fn total_model_flops(model: &EncoderModel) -> u64 {
    let d = model.config.embed_dim as u64;
    let c = model.config.num_classes as u64;
    model_prunable_flops(model) + 2 * d * d + 2 * c * d
}

/// Fraction of prunable FLOPs removed going from `before` to `after`.
pub fn compression_rate(before: &EncoderModel, after: &EncoderModel) -> f64 {
    rate_from_flops(model_prunable_flops(before), model_prunable_flops(after))
}

pub fn rate_from_flops(before: u64, after: u64) -> f64 {
    if before == 0 {
        return 0.0;
    }
    1.0 - after as f64 / before as f64
}

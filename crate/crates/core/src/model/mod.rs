//! Encoder data model, `.kpz` container I/O, masks and FLOPs accounting.

mod config;
pub mod container;
mod encoder;
pub mod flops;
mod masks;

pub use config::ModelConfig;
pub use container::{load_container, save_container};
pub use encoder::{
    Attention, AttentionHead, ClassifierHead, EncoderLayer, EncoderModel, FeedForward,
    LayerNormParams,
};
pub use flops::{
    compression_rate, flops_per_head, flops_per_neuron, model_prunable_flops, prunable_flops,
    total_model_flops,
};
pub use masks::{MaskState, SublayerId, SublayerKind};

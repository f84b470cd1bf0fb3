//! Forward pass, distillation loss and the mask-gradient backward pass.

mod backward;
mod forward;
mod loss;

pub use backward::{
    backward_masks, layernorm_backward, mask_gradients, mask_gradients_ce, softmax_backward,
    MaskGradients,
};
pub use forward::{forward, logits, AttentionTrace, FeedForwardTrace, ForwardTrace, LayerTrace};
pub use loss::{cross_entropy, cross_entropy_grad, kl_distill_grad, kl_distill_loss};

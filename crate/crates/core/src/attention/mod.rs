//! Attention kernels: causal self-attention, attention fused with retrieved
//! memories, linear biases, and rotary rotation.

mod alibi;
mod kernel;
mod rope;

pub use alibi::{alibi_bias, alibi_slopes, AlibiBias, MEMORY_DISTANCE};
pub use kernel::{causal_mask, extended_attention, AttentionInputs, AttentionOutput, PositionBias};
pub use rope::{rope_rotate, rotate_row, RopeParams};

pub(crate) use kernel::attend;

#[cfg(test)]
mod tests;

//! Minimal tensor arithmetic with reverse-mode gradients, transformer
//! building blocks, and an AdamW optimizer. 64-bit floats throughout.

pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions};
pub use nn::{masked_multihead_attention, Block, LayerNorm, Linear, Stack};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use tape::{AttentionMask, Backprop, Grads, ParamId, ParamStore, Tape, Var};
pub use tensor::Tensor;

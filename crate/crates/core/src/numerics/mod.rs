//! Dense tensors, reverse-mode gradients and finite-difference checks.
//!
//! All arithmetic is `f64`. Forward kernels live in [`kernels`] and are
//! shared by the eager helpers and by [`Tape`], so both paths agree bit for
//! bit.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use kernels::{
    conv3d_patch, gelu, layer_norm, patchify, rotary_logits, softmax_rows, Mask, RowMix,
    LAYER_NORM_EPS,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{dot, Tensor};

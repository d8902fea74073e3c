//! Minimal differentiable network substrate.
//!
//! Dense N-d tensors with reverse-mode gradients implemented per layer, a 3D
//! convolution stack (im2col + GEMM), group normalization, SiLU, sinusoidal
//! time embeddings, spatial self-attention, and an Adam optimizer. Training
//! runs in f32; gradient checks instantiate the same layers in f64.

mod adam;
mod archive;
mod gradcheck;
mod layers;
mod ops;
mod scalar;
mod tensor;

pub use adam::Adam;
pub use archive::TensorArchive;
pub use gradcheck::{grad_check, grad_check_fragment, Fragment, GradCheckReport};
pub use layers::{
    default_groups, ATTENTION_POSITION_CAP,
    Conv3d, GroupNorm, Linear, ResBlock3d, SelfAttention3d, Sigmoid, Silu, Upsample2x,
};
pub use ops::{conv_out_extent, time_embedding};
pub use scalar::Scalar;
pub use tensor::{all_finite, Param, ParamSet, Tensor};

/// Timing-probe helper, test use only.
pub fn bench_im2col(x: &ndarray::ArrayD<f32>) -> ndarray::Array2<f32> {
    ops::im2col(x, 3, 1, 1)
}

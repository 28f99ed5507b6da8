//! Dense-tensor layers with hand-paired forward and backward passes.

mod adam;
mod batchnorm;
mod checkpoint;
mod conv;
mod gradcheck;
mod linear;
mod loss;
mod model;
mod relu;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, ParamMut};
pub use batchnorm::{batchnorm_backward, BatchNorm2d, BatchStats, BnCache};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader};
pub use conv::{conv2d_backward, conv2d_forward, output_extent, Conv2d, KERNEL_SIZE};
pub use gradcheck::{gradient_check, relative_error, GradCheckReport, GroupError, KINK_RADIUS};
pub use linear::{linear_backward, linear_forward, Linear};
pub use loss::softmax_cross_entropy;
pub use model::{Arch, BlockGrads, ConvBlock, Gradients, LayerSpec, Model, ParamGroup, Trace, PADDING};
pub use relu::{relu_backward, relu_forward, relu_guided_backward, ReluRule};
pub use tensor::Tensor;

/// Floating-point type used for every tensor.
#[cfg(not(feature = "f32"))]
pub type Scalar = f64;
#[cfg(feature = "f32")]
pub type Scalar = f32;

/// Name of [`Scalar`], recorded in checkpoints and manifests.
#[cfg(not(feature = "f32"))]
pub const PRECISION: &str = "f64";
#[cfg(feature = "f32")]
pub const PRECISION: &str = "f32";

/// Pixel scaling applied before the first layer.
pub const PIXEL_SCALING: &str = "u8/255";

pub fn scale_pixel(v: u8) -> Scalar {
    v as Scalar / 255.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

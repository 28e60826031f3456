//! Minimal f64 neural-network substrate: NCHW tensors, 3x3 convolutions,
//! linear layers, activations, and Adam, all with explicit backward passes.
//! Every gradient path is verified against finite differences in tests.

pub mod adam;
pub mod conv;
pub mod linear;
pub mod ops;
pub mod param;
pub mod tensor;

pub use adam::Adam;
pub use conv::Conv2d;
pub use linear::Linear;
pub use ops::{
    mse_with_grad, sigmoid, softmax_cross_entropy, upsample2x, upsample2x_backward, Relu,
    SigmoidLayer, Silu,
};
pub use param::Param;
pub use tensor::Tensor;

//! CPU implementations of the three lightweight backbones used by the
//! few-shot pipeline: MobileNetV2, MobileNetV3-Small and MobileNetV3-Large.
//!
//! The crate is deliberately small: NCHW `f32` tensors, the handful of layers
//! these architectures need (dense/depthwise convolution, batch norm,
//! hard-swish family activations, squeeze-excitation), hand-written backward
//! passes, SGD/Adam, static cost profiling and safetensors weight exchange.

pub mod arch;
pub mod blocks;
pub mod error;
pub mod layers;
pub mod optim;
pub mod tensor;
pub mod weights;

pub use arch::{softmax_cross_entropy, Architecture, Backbone, Profile};
pub use error::WeightsError;
pub use optim::{cosine_lr, Optimizer, OptimizerKind};
pub use tensor::Tensor;

//! Minimal dense tensor engine with manual backpropagation.

pub mod checkpoint;
pub mod gradcheck;
mod network;
pub mod ops;
mod sgd;
mod tensor;

pub use network::{
    backward, forward, ForwardCache, Gradients, Heads, LayerKind, LayerParams, LayerSpec,
    NetworkConfig, NetworkSpec, Parameters, INPUT,
};
pub use ops::Window;
pub use sgd::{Adam, Optimizer, OptimizerKind, Sgd};
pub use tensor::{Scalar, Tensor};

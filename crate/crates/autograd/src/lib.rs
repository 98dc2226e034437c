//! Small reverse-mode automatic differentiation engine for CPU training of
//! convolutional networks.
//!
//! Tensors are dense, row-major and generic over `f32`/`f64`. Convolutions use
//! im2col with a blocked matrix multiply.

pub mod conv;
pub mod graph;
pub mod nn;
pub mod optim;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use nn::{Bound, ParamGroup};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use scalar::Scalar;
pub use tensor::{numel, ShapeMismatch, Tensor};

//! Dense `f64` tensors with a reverse-mode gradient tape.
//!
//! Covers what a volumetric GAN needs: elementwise math, reductions,
//! channel softmax, batch normalization, dense layers, and 3D convolution
//! with its transpose. Backward rules are expressed through the same
//! differentiable primitives, so gradients of gradients are available via
//! [`grad`] with `create_graph = true`.

mod error;
mod gradcheck;
pub mod kernels;
mod norm;
mod ops;
mod tensor;
mod var;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_errors, GradCheckReport};
pub use kernels::ConvGeometry;
pub use norm::{batch_norm, BatchNormMode, BatchStats};
pub use ops::{conv_geometry, conv_transpose_geometry};
pub use tensor::Tensor;
pub use var::{backward, grad, Gradients, Var};

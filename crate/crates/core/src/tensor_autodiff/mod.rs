//! Dense `f64` tensors and a reverse-mode tape covering the primitives the
//! two-branch network needs: dilated convolution, ReLU, sigmoid, affine maps,
//! global average pooling, quantized ROI max pooling, and the fusion algebra.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::check_gradients;
pub use graph::{sigmoid, Gradients, Graph, NodeId};
pub use tensor::{ConvSpec, Tensor};

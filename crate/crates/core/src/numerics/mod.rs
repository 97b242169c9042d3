//! Dense tensors and the fixed set of differentiable operations.

mod graph;
mod optim;
mod tensor;

pub use graph::{softmax_channels, window_out, BatchStats, ConvGeom, Graph, Var};
pub use optim::{sgd_step, Sgd};
pub use tensor::Tensor;

//! Dense tensors, a reverse-mode tape, and Adam.

mod adam;
mod graph;
mod tensor;

pub use adam::AdamState;
pub use graph::{gelu, sigmoid, Graph, Var};
pub use tensor::Tensor;

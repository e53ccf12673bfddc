//! Dense tensors with reverse-mode automatic differentiation.

mod elementwise;
mod error;
pub mod gradcheck;
mod structural;
mod tensor;

pub use elementwise::{broadcast_shape, inject_sigmoid_backward_fault, BinaryKind, UnaryKind, DIV_EPS};
pub use error::{NdError, NdResult};
pub use structural::ReduceKind;
pub use tensor::{Gradients, NodeId, Tape, Tensor};

#[cfg(test)]
mod tests;

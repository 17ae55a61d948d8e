//! Reverse-mode differentiation engine: dense tensors, a Wengert tape over
//! the op set the networks need, and the fused canonical-correlation node.

mod correlation;
mod tape;
mod tensor;

pub use correlation::{correlation_objective, CorrelationWitness};
pub use tape::{ccc, Gradients, NodeId, SoftmaxAxis, Tape};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;

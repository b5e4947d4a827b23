//! Dense tensors, a reverse-mode tape over them, and a finite-difference oracle.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_at, finite_difference_grad, max_relative_error};
pub use tape::{Gradients, Rotation, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;

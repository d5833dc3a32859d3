//! Dense tensors and a reverse-mode differentiation tape.

mod gradcheck;
mod graph;
pub mod io;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

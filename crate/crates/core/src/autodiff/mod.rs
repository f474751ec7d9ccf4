//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! Every op appends a node to a [`Graph`]; [`Graph::backward`] replays the
//! tape in reverse, accumulating gradients additively into shared parents.
//! Broadcasting is limited to scalar-with-tensor and row-vector-with-matrix.

mod check;
mod gemm;
mod graph;
mod tensor;

pub use check::{grad_check, grad_check_multi, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use graph::{stable_lse, Gradients, Graph, Var};
pub use tensor::Tensor;

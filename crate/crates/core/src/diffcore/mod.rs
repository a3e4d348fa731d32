//! Minimal dense-tensor math with reverse-mode automatic differentiation.
//!
//! Just enough machinery for the classifier, the scorer, and gradients of a
//! scalar loss with respect to embedding inputs: f64 everywhere, a fixed op
//! set, no broadcasting beyond bias rows.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{
    check_random_graph, finite_diff_grad, max_rel_error, random_scalar_graph, RandomScalarGraph,
};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;

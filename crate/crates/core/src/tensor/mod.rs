//! Dense tensors with a recorded computation graph for reverse-mode
//! differentiation.

mod array;
pub mod gradcheck;
mod graph;
mod kernels;

pub use array::Array;
pub use gradcheck::{check_params, finite_difference_check, primitive_suite, GradCheckReport, SuiteEntry};
pub use graph::{concat, Gradients, Graph, NodeId, OpKind, Tensor};

//! Dense tensors and a define-by-run reverse-mode tape.

pub mod check;
mod gemm;
pub mod graph;
pub mod tensor;

pub use check::{finite_difference_check, grad_wrt_input};
#[cfg(any(test, feature = "fault-injection"))]
pub use graph::set_sigmoid_fault;
pub use graph::{logsumexp, GradientSet, Graph, LeafKind, NodeId, LEAKY_SLOPE};
pub use tensor::Tensor;

/// Names of the forward primitives the tape supports, each with an exact
/// local derivative rule.
pub fn primitive_set() -> &'static [&'static str] {
    &[
        "matmul",
        "add",
        "sub",
        "bias_add",
        "mul",
        "scale",
        "relu",
        "leaky_relu",
        "sigmoid",
        "square",
        "sum",
        "mean",
        "row_sum",
        "row_logsumexp",
        "sq_dist",
        "l2_norm",
        "row_normalize",
        "exp",
        "log",
        "transpose",
        "reshape",
    ]
}

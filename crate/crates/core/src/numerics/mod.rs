//! Dense tensors, reverse-mode differentiation and a finite-difference oracle.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{check_gradients, finite_diff_grad, relative_error, GradReport, GRAD_FLOOR};
pub use graph::{Graph, Var};
pub use tensor::{dot, l2_normalize, matmul, matmul_t, norm, softmax_rows, Tensor, NORM_EPS};

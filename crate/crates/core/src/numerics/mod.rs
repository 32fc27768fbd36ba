//! Dense kernels, reverse-mode differentiation, Adam, and gradient checking.

mod adam;
mod graph;
mod gradcheck;
mod param;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use graph::{sigmoid, Bound, Gradients, Graph, Var};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::{
    cosine_sim, dot, matmul, matmul_t, norm, pinv_exact, softmax, softmax_rows, t_matmul, Tensor,
};

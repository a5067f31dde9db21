//! Dense tensors, reverse-mode differentiation and gradient oracles.

mod fd;
mod graph;
mod ops;
mod params;
mod tensor;
mod unroll;

pub use fd::{finite_diff_grad, relative_error, relative_error_flat};
pub use graph::{Graph, ParamVars, Var};
pub use ops::{cross_entropy, linear_forward, mse_loss, relu};
pub use params::{sgd_step, ParamVector};
pub use tensor::Tensor;
pub use unroll::{grad_through_update, unroll_sgd, GradMode, InnerSteps};

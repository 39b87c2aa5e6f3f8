//! Dense `f64` numerics with reverse-mode gradients.

mod gradcheck;
mod matrix;
mod prims;
mod tape;

pub use gradcheck::grad_check;
pub use matrix::{dot, norm, Matrix};
pub use prims::{cosine_sim, gelu, gelu_grad, normal_cdf, softmax, softmax_into, COSINE_EPS};
pub use tape::{Function, GradTape, Gradients, Var};

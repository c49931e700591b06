//! Dense tensors, a reverse-mode tape, named parameter sets and a
//! finite-difference gradient checker.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{analytic_grad, eval_loss, grad_check, numeric_grad, relative_error};
pub use params::ParamSet;
pub use tape::{Bound, Gradients, Tape, Var, LOG_FLOOR, STANDARDIZE_EPS};
pub use tensor::Tensor;

//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records each operation as it is evaluated. Parameters enter the
//! tape as leaves via [`Tape::leaf`]; their `requires_grad` flag decides
//! whether the reverse pass computes anything for them. Frozen networks
//! therefore cost only the input-gradient half of their backward pass.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, GRAD_CHECK_EPS};
pub use kernels::cubic_weight;
pub use tape::{softmax_rows, Gradients, Tape, Var, CE_EPSILON};
pub use tensor::Tensor;

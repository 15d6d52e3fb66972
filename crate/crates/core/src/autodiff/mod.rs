//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport, REL_ERROR_FLOOR};
pub use tape::{Gradients, NodeId, Primitive, Tape, MASK_NEG};
pub use tensor::Tensor;

pub(crate) use tape::{log_sum_exp, softmax_in_place};

//! Dense matrices with reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, numeric_gradient};
pub use tape::{softmax_rows, BatchNormStats, GroupIndex, Gradients, Mode, Tape, Var};
pub use tensor::Tensor2D;

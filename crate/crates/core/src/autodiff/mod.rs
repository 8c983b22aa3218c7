//! Dense tensors with reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    compare_with_central_differences, grad_check, grad_check_report, relative_error, GradReport,
};
pub use tape::{NormOutput, NormStats, Tape, Var};
pub use tensor::Tensor;

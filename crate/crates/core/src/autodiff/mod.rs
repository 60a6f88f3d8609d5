//! Dense tensors with reverse-mode automatic differentiation.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{
    grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamReport,
    DEFAULT_DENOMINATOR_FLOOR,
};
pub use tape::{CustomBackward, Tape, Var};
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use tape::{dot, norm};

#[cfg(test)]
mod tests;

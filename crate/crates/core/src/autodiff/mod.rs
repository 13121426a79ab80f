//! Reverse-mode differentiation over dense double-precision tensors.

mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport, FD_NOISE_FACTOR, REL_ERR_FLOOR};
pub use param::{Group, Param, ParamId, ParamStore};
pub use tape::{Gradients, Mode, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
pub(crate) use tensor::gemm;

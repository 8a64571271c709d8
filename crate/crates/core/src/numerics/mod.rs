//! Dense tensors, reverse-mode gradients and the AdamW optimizer.

mod adamw;
mod gradcheck;
pub(crate) mod kernels;
mod linalg;
mod tape;
mod tensor;

pub use adamw::{adamw_step, AdamW, AdamWConfig, OptimState};
pub use gradcheck::{build_function, check_gradient, grad_check, GradCheckReport, REGISTERED};
pub use linalg::random_orthogonal;
pub use tape::{AttnMask, Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

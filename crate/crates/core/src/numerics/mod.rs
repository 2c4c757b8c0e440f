//! Dense tensors, reverse-mode differentiation, optimization and gradient checking.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use optim::AdamState;
pub use params::{Grads, ParamId, ParamStore};
pub use tape::{matmul, Tape, Var};
pub use tensor::Tensor;

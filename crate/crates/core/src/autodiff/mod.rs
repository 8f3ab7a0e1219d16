//! Reverse-mode automatic differentiation: tensors, the recording tape,
//! optimizers, and finite-difference gradient checking.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, gradient_check_many, GRADCHECK_FLOOR};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use tape::{Gradients, Tape, Var, BCE_EPS};
pub use tensor::{ParamId, ParamSet, Tensor};

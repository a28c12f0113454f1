//! Dense numeric core: tensors, the reverse-mode tape, parameters and the
//! finite-difference gradient checker.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, grad_check, GradCheckOptions, GradCheckReport};
pub use params::{init_params, Checkpoint, Init, NamedArray, ParamId, ParamSpec, ParamStore, CHECKPOINT_FORMAT};
pub use tape::{Precision, Tape, Var};
pub use tensor::Tensor2;

/// Negative slope of every leaky-ReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.01;

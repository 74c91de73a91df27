//! Minimal reverse-mode automatic differentiation over `f64` tensors.

mod ops;
mod optim;
mod params;
mod tensor;

pub use ops::log_softmax;
pub use optim::{optimizer_step, AdamConfig, Moments, OptimizerState};
pub use params::{GradStore, Param, ParamId, ParamSet, ParamStore, Scope};
pub use tensor::{Tape, Tensor};

//! Deterministic dense tensors, reverse-mode differentiation, Adam and a
//! finite-difference gradient checker.

mod backend;
mod element;
mod error;
mod gradcheck;
pub mod kernels;
mod optim;
mod rng;
mod tape;
mod tensor;

pub use backend::{Backend, Eager};
pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, primitive_cases, Case, ScalarFn, DEFAULT_STEP};
pub use kernels::AttnDims;
pub use optim::{adam_step, AdamConfig, AdamState};
pub use rng::Rng;
pub use tape::{CustomBackward, Grads, Tape, Var};
pub use tensor::Tensor;

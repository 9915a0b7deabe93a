use cost_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("hook error: {0}")]
    Hook(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid timestep {0}: must lie in [0, 1]")]
    Timestep(f64),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("intervention error: {0}")]
    Intervention(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },
    #[error("task error: {0}")]
    Task(String),
    #[error("ensemble barrier timed out after {0:?}")]
    BarrierTimeout(std::time::Duration),
    #[error("analysis error: {0}")]
    Analysis(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

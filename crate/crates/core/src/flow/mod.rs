mod path;
mod sampler;
mod schedule;
mod train;

pub use path::{estimate_x0, interpolate, velocity_target};
pub use sampler::{
    euler_sample, euler_sample_from, initial_noise, Conditioning, EulerRun, LatentIntervention, SampleTrace, VelocityField,
};
pub use schedule::Schedule;
pub use train::{flow_gradients, flow_loss, train_step, train_step_with, TrainBatch, TrainOptions};

//! Analysis and intervention toolkit over sampling runs.

mod cka;
mod energy;
mod ensemble;
mod noise;
mod sensitivity;
mod swap;

pub use cka::{cka_matrix, linear_cka, video_dissimilarity, CkaMatrix, Representation};
pub use energy::{energy_map, EnergyMap};
pub use ensemble::{ensemble_sample, EnsembleConfig, EnsembleMode};
pub use noise::{Intervention, NoiseAtFrame, NoiseAtStep, NoiseOptions};
pub use sensitivity::{mean_stderr, sensitivity_curve, SensitivityCurve, SweepPoint};
pub use swap::{is_flip, layer_swap, layer_swap_sweep, SwapOutcome, SwapRegion};

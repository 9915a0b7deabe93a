mod config;
mod dit;
mod embed;
mod hooks;
mod patch;

pub use config::{ModelConfig, PARAM_BUDGET};
pub use dit::{Block, Context, Dit, Linear};
pub use embed::{position_encoding, sinusoid, timestep_features};
pub use hooks::{mean_in_order, HiddenState, HookRegistry, Injection, MeanGroup};
pub use patch::{patchify, unpatchify};

//! Declarative experiment configuration (TOML, strict).

use std::path::{Path, PathBuf};

use cost_core::flow::Schedule;
use cost_core::model::ModelConfig;
use cost_core::probe::{NoiseOptions, Representation, SwapRegion};
use cost_core::tasks::{Family, MazeParams, ScoreWeights};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Base seed: model init for `train`, initial noise everywhere else.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub perturb: PerturbConfig,
    pub cka: CkaConfig,
    pub energy: EnergyConfig,
    pub swap: SwapConfig,
    pub ensemble: EnsembleSpec,
    pub frames: FramesConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            model: ModelConfig::default(),
            schedule: Schedule::default(),
            task: TaskConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            perturb: PerturbConfig::default(),
            cka: CkaConfig::default(),
            energy: EnergyConfig::default(),
            swap: SwapConfig::default(),
            ensemble: EnsembleSpec::default(),
            frames: FramesConfig::default(),
        }
    }
}

/// Held-out evaluation tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub family: Family,
    pub count: usize,
    pub split_seed: u64,
    pub wall_density: f64,
    pub min_moves: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { family: Family::Maze, count: 200, split_seed: 999, wall_density: 0.2, min_moves: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warm-up length in steps.
    pub warmup: usize,
    /// Final fraction of `steps` over which the rate decays linearly to zero.
    pub decay_fraction: f64,
    /// Stop early once this much wall-clock has elapsed.
    pub time_budget_secs: Option<f64>,
    pub split_seed: u64,
    /// Probability that a batch is drawn from the pattern family.
    pub pattern_fraction: f64,
    /// Probability of replacing the task label with the null label.
    pub cond_dropout: f64,
    pub log_every: usize,
    /// Evaluate on the held-out tasks after training.
    pub eval_after: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1050,
            batch_size: 16,
            lr: 3e-3,
            warmup: 100,
            decay_fraction: 0.2,
            time_budget_secs: None,
            split_seed: 7,
            pattern_fraction: 0.0,
            cond_dropout: 0.0,
            log_every: 50,
            eval_after: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub batch_size: usize,
    pub weights: ScoreWeights,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { batch_size: 50, weights: ScoreWeights::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    pub count: usize,
    /// Injection steps for step noise; all steps when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<Vec<usize>>,
    /// Frames for frame noise; every non-conditioning frame when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frames: Option<Vec<usize>>,
    pub noise_seed: u64,
    pub options: NoiseOptions,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self { count: 100, steps: None, frames: None, noise_seed: 1234, options: NoiseOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CkaConfig {
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub injection_steps: Option<Vec<usize>>,
    pub representation: Representation,
    pub noise_seed: u64,
    /// Heatmap cell edge in pixels.
    pub cell_px: usize,
}

impl Default for CkaConfig {
    fn default() -> Self {
        Self { count: 16, injection_steps: None, representation: Representation::X0Hat, noise_seed: 1234, cell_px: 12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConfig {
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
    /// Index of the held-out instance to visualize.
    pub instance: u64,
    pub cell_px: usize,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self { step: 0, layers: None, instance: 0, cell_px: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwapConfig {
    pub pairs: usize,
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
    pub region: SwapRegion,
    pub donor_split_seed: u64,
    pub batch_size: usize,
}

impl Default for SwapConfig {
    fn default() -> Self {
        Self { pairs: 50, step: 0, layers: None, region: SwapRegion::default(), donor_split_seed: 4242, batch_size: 25 }
    }
}

/// Which layers an ensemble averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Early,
    Mid,
    Full,
    Layers { first: usize, last: usize },
}

impl Window {
    pub fn resolve(self, model: &ModelConfig) -> (usize, usize) {
        match self {
            Window::Early => model.early_window(),
            Window::Mid => model.mid_window(),
            Window::Full => model.full_window(),
            Window::Layers { first, last } => (first, last),
        }
    }

    pub fn label(self) -> String {
        match self {
            Window::Early => "early".into(),
            Window::Mid => "mid".into(),
            Window::Full => "full".into(),
            Window::Layers { first, last } => format!("layers_{first}_{last}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSpec {
    pub k: usize,
    pub window: Window,
    pub steps: Vec<usize>,
    pub timeout_secs: u64,
    /// Non-inferiority margin for the ensemble-vs-single comparison.
    pub margin: f64,
    /// Instances for the window ablation; the task count when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation_count: Option<usize>,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self { k: 3, window: Window::Mid, steps: vec![0], timeout_secs: 300, margin: 0.02, ablation_count: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FramesConfig {
    pub frames: Vec<usize>,
    /// Only tasks whose oracle path needs at least this many moves.
    pub min_moves: usize,
}

impl Default for FramesConfig {
    fn default() -> Self {
        Self { frames: vec![1, 2, 4, 8], min_moves: 4 }
    }
}

fn bad(key: &str, reason: impl Into<String>) -> CliError {
    CliError::Config { key: key.into(), reason: reason.into() }
}

/// Pulls the offending key out of a deserializer message where possible.
fn key_of(message: &str) -> String {
    for marker in ["unknown field `", "missing field `"] {
        if let Some(rest) = message.split(marker).nth(1) {
            if let Some(k) = rest.split('`').next() {
                return k.to_string();
            }
        }
    }
    "<document>".into()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            bad(&key_of(&msg), msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| bad("<document>", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| bad("model", e.to_string()))?;
        let [frames, h, w] = self.model.video;
        if h != w {
            return Err(bad("model.video", "grid must be square"));
        }
        if self.model.channels != cost_core::tasks::Channel::COUNT {
            return Err(bad("model.channels", format!("tasks render {} channels", cost_core::tasks::Channel::COUNT)));
        }
        if self.task.count == 0 {
            return Err(bad("task.count", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.task.wall_density) {
            return Err(bad("task.wall_density", "must lie in [0, 1)"));
        }
        if self.task.min_moves == 0 || self.task.min_moves >= frames {
            return Err(bad("task.min_moves", format!("must lie in 1..{frames}")));
        }
        if self.train.batch_size == 0 || !(self.train.lr > 0.0) {
            return Err(bad("train", "batch_size and lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.train.pattern_fraction)
            || !(0.0..=1.0).contains(&self.train.cond_dropout)
            || !(0.0..=1.0).contains(&self.train.decay_fraction)
        {
            return Err(bad("train", "probabilities must lie in [0, 1]"));
        }
        if self.eval.batch_size == 0 || self.swap.batch_size == 0 {
            return Err(bad("eval.batch_size", "must be positive"));
        }
        let n = self.schedule.n_steps();
        if let Some(s) = self.perturb.steps.iter().flatten().find(|&&s| s >= n) {
            return Err(bad("perturb.steps", format!("step {s} outside {n} steps")));
        }
        if let Some(f) = self.perturb.frames.iter().flatten().find(|&&f| f >= frames) {
            return Err(bad("perturb.frames", format!("frame {f} outside {frames} frames")));
        }
        if let Some(s) = self.cka.injection_steps.iter().flatten().find(|&&s| s >= n) {
            return Err(bad("cka.injection_steps", format!("step {s} outside {n} steps")));
        }
        if self.energy.step >= n || self.swap.step >= n {
            return Err(bad("energy.step", "capture step outside the schedule"));
        }
        if self.ensemble.k == 0 {
            return Err(bad("ensemble.k", "needs at least one seed"));
        }
        let (lo, hi) = self.ensemble.window.resolve(&self.model);
        if lo > hi || hi >= self.model.layers {
            return Err(bad("ensemble.window", format!("{lo}..={hi} outside {} layers", self.model.layers)));
        }
        if self.frames.frames.iter().any(|&f| f == 0 || f > frames) {
            return Err(bad("frames.frames", format!("frame counts must lie in 1..={frames}")));
        }
        if self.frames.min_moves >= frames {
            return Err(bad("frames.min_moves", format!("must be below {frames}")));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn maze_params(&self) -> MazeParams {
        MazeParams {
            size: self.model.video[1],
            frames: self.model.video[0],
            wall_density: self.task.wall_density,
            min_moves: self.task.min_moves,
        }
    }
}

//! Gaussian perturbations of the latent: one step across all frames, or one
//! frame across all steps.

use cost_tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{LatentIntervention, Schedule};

/// Shared knobs of the noise interventions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseOptions {
    /// Multiply the unit draw by `σ(s)` of the step being perturbed.
    pub schedule_scaled: bool,
    /// Let step noise overwrite the conditioning frames for that evaluation.
    pub unclamped: bool,
    /// Permit frame noise on frame 0.
    pub allow_conditioning_frame: bool,
}

impl Default for NoiseOptions {
    fn default() -> Self {
        Self { schedule_scaled: false, unclamped: false, allow_conditioning_frame: false }
    }
}

/// Replaces `x[b, frames]` with fresh draws, instance `b` from its own stream.
fn fill(x: &mut Tensor<f32>, stream: u64, frames: Option<usize>, amplitude: f32) -> Result<()> {
    let s = x.shape().to_vec();
    if s.len() != 5 {
        return Err(Error::Intervention(format!("latent must be (B, F, H, W, C), got {s:?}")));
    }
    let per_frame = s[2] * s[3] * s[4];
    let per_item = s[1] * per_frame;
    let data = x.data_mut();
    for b in 0..s[0] {
        let item = &mut data[b * per_item..(b + 1) * per_item];
        let slice = match frames {
            Some(f) => &mut item[f * per_frame..(f + 1) * per_frame],
            None => item,
        };
        Rng::derive(stream, b as u64).fill_normal(slice);
        if amplitude != 1.0 {
            for v in slice.iter_mut() {
                *v *= amplitude;
            }
        }
    }
    Ok(())
}

fn amplitude(opts: &NoiseOptions, s: f64) -> f32 {
    if opts.schedule_scaled {
        Schedule::sigma(s) as f32
    } else {
        1.0
    }
}

/// Before the evaluation at `step`, the whole latent becomes fresh noise.
/// `step == n_steps` is accepted and never fires: no evaluation follows the
/// last state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseAtStep {
    pub step: usize,
    pub seed: u64,
    pub options: NoiseOptions,
}

impl NoiseAtStep {
    pub fn new(step: usize, seed: u64) -> Self {
        Self { step, seed, options: NoiseOptions::default() }
    }
}

impl LatentIntervention for NoiseAtStep {
    fn describe(&self) -> String {
        format!("noise_at_step(step={}, seed={})", self.step, self.seed)
    }

    fn validate(&self, schedule: &Schedule, _frames: usize) -> Result<()> {
        if self.step > schedule.n_steps() {
            return Err(Error::Intervention(format!(
                "noise step {} outside {} steps",
                self.step,
                schedule.n_steps()
            )));
        }
        Ok(())
    }

    fn before_eval(&self, step: usize, s: f64, x: &mut Tensor<f32>) -> Result<bool> {
        if step != self.step {
            return Ok(false);
        }
        fill(x, Rng::derive(self.seed, step as u64).next_u64(), None, amplitude(&self.options, s))?;
        Ok(self.options.unclamped)
    }
}

/// Before every evaluation, one frame becomes fresh noise (a new draw each step).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseAtFrame {
    pub frame: usize,
    pub seed: u64,
    pub options: NoiseOptions,
}

impl NoiseAtFrame {
    pub fn new(frame: usize, seed: u64) -> Self {
        Self { frame, seed, options: NoiseOptions::default() }
    }
}

impl LatentIntervention for NoiseAtFrame {
    fn describe(&self) -> String {
        format!("noise_at_frame(frame={}, seed={})", self.frame, self.seed)
    }

    fn validate(&self, _schedule: &Schedule, frames: usize) -> Result<()> {
        if self.frame >= frames {
            return Err(Error::Intervention(format!("noise frame {} outside {frames} frames", self.frame)));
        }
        if self.frame == 0 && !self.options.allow_conditioning_frame {
            return Err(Error::Intervention("frame 0 holds the conditioning frame".into()));
        }
        Ok(())
    }

    fn before_eval(&self, step: usize, s: f64, x: &mut Tensor<f32>) -> Result<bool> {
        let stream = Rng::derive(self.seed ^ 0x6672_616d_65, step as u64).next_u64();
        fill(x, stream, Some(self.frame), amplitude(&self.options, s))?;
        Ok(false)
    }
}

/// Serializable description of a perturbation or hook-level intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum Intervention {
    NoiseAtStep { step: usize, seed: u64 },
    NoiseAtFrame { frame: usize, seed: u64 },
    LayerSwap { step: usize, layer: usize },
    EnsembleAverage { step: usize, layers: (usize, usize), group_id: u64 },
}

impl Intervention {
    /// Latent-level interventions as sampler plug-ins; hook-level variants
    /// return `None` and are realized through a hook registry instead.
    pub fn latent(&self, options: NoiseOptions) -> Option<Box<dyn LatentIntervention>> {
        match *self {
            Intervention::NoiseAtStep { step, seed } => Some(Box::new(NoiseAtStep { step, seed, options })),
            Intervention::NoiseAtFrame { frame, seed } => Some(Box::new(NoiseAtFrame { frame, seed, options })),
            _ => None,
        }
    }
}

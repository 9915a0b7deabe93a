//! Layer-wise latent swapping between paired instances.

use cost_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{euler_sample, Conditioning, Schedule};
use crate::model::{Dit, HookRegistry, Injection};
use crate::tasks::{decode_positions, unstack, TaskInstance, TaskSpec};

/// Which token rows of the recipient's block output are replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SwapRegion {
    /// Every token.
    All,
    /// Tokens of the generated frames; the conditioning-frame tokens keep the
    /// recipient's own values.
    #[default]
    Generated,
}

/// Recipient output and whether its outcome followed the donor.
#[derive(Debug, Clone, PartialEq)]
pub struct SwapOutcome {
    pub layer: usize,
    /// Swapped recipient videos, one per pair.
    pub videos: Vec<Tensor<f32>>,
    /// Per pair: the swapped recipient ends on the donor's goal and not its own.
    pub flips: Vec<bool>,
}

impl SwapOutcome {
    pub fn flip_rate(&self) -> f64 {
        self.flips.iter().filter(|f| **f).count() as f64 / self.flips.len().max(1) as f64
    }
}

fn region_rows(model: &Dit<f32>, frames: usize, cond_frames: usize, region: SwapRegion) -> Result<Vec<usize>> {
    let [pf, ph, pw] = model.config.patch;
    let (h, w) = (model.config.video[1] / ph, model.config.video[2] / pw);
    let f = frames / pf;
    let first = match region {
        SwapRegion::All => 0,
        SwapRegion::Generated => {
            if cond_frames % pf != 0 {
                return Err(Error::Intervention("conditioning frames straddle a temporal patch".into()));
            }
            cond_frames / pf
        }
    };
    Ok((first * h * w..f * h * w).collect())
}

/// Flip rule for maze pairs: the recipient's final decoded cell is the
/// donor's goal and differs from its own.
pub fn is_flip(video: &Tensor<f32>, recipient: &TaskInstance, donor: &TaskInstance) -> Result<bool> {
    match (&recipient.spec, &donor.spec) {
        (TaskSpec::Maze(a), TaskSpec::Maze(b)) => {
            let last = *decode_positions(video)?.last().expect("frames");
            Ok(last == b.goal && last != a.goal)
        }
        _ => Err(Error::Intervention("swap flips are defined for maze pairs".into())),
    }
}

/// Runs the donors with captures at `step` for every requested layer, then
/// reruns the recipients once per layer with that layer's output replaced.
/// Both runs share `seed`.
#[allow(clippy::too_many_arguments)]
pub fn layer_swap_sweep(
    model: &Dit<f32>,
    recipients: &Conditioning,
    donors: &Conditioning,
    frames: usize,
    seed: u64,
    schedule: &Schedule,
    step: usize,
    layers: &[usize],
    region: SwapRegion,
) -> Result<Vec<(usize, Vec<Tensor<f32>>)>> {
    if recipients.frames.shape() != donors.frames.shape() {
        return Err(Error::Shape(format!(
            "swap pair shapes differ: {:?} vs {:?}",
            recipients.frames.shape(),
            donors.frames.shape()
        )));
    }
    if step >= schedule.n_steps() {
        return Err(Error::Intervention(format!("swap step {step} outside {} steps", schedule.n_steps())));
    }
    let mut capture = HookRegistry::new();
    capture.register_capture(&[step], layers)?;
    let donor = euler_sample(model, donors, frames, seed, schedule, Some(&mut capture), &[])?;
    let rows = region_rows(model, frames, recipients.n_frames(), region)?;
    let mut out = Vec::with_capacity(layers.len());
    for &layer in layers {
        let source = donor
            .hidden
            .iter()
            .find(|h| h.step == step && h.layer == layer)
            .ok_or_else(|| Error::Hook(format!("donor capture missing at layer {layer}")))?;
        let mut hooks = HookRegistry::new();
        let rule = match region {
            SwapRegion::All => Injection::Replace(source.tokens.clone()),
            SwapRegion::Generated => Injection::ReplaceTokens(source.tokens.clone(), rows.clone()),
        };
        hooks.inject(step, layer, rule)?;
        let run = euler_sample(model, recipients, frames, seed, schedule, Some(&mut hooks), &[])?;
        out.push((layer, unstack(run.final_video())?));
    }
    Ok(out)
}

/// Single-layer swap with flip decisions for maze pairs.
#[allow(clippy::too_many_arguments)]
pub fn layer_swap(
    model: &Dit<f32>,
    recipients: &[&TaskInstance],
    donors: &[&TaskInstance],
    seed: u64,
    schedule: &Schedule,
    step: usize,
    layer: usize,
    region: SwapRegion,
) -> Result<SwapOutcome> {
    let frames = recipients.first().ok_or_else(|| Error::Intervention("no swap pairs".into()))?.frames();
    let rc = crate::tasks::conditioning(recipients)?;
    let dc = crate::tasks::conditioning(donors)?;
    let (_, videos) = layer_swap_sweep(model, &rc, &dc, frames, seed, schedule, step, &[layer], region)?
        .pop()
        .expect("one layer requested");
    let flips = videos
        .iter()
        .zip(recipients.iter().zip(donors))
        .map(|(v, (r, d))| is_flip(v, r, d))
        .collect::<Result<_>>()?;
    Ok(SwapOutcome { layer, videos, flips })
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and input geometry of the diffusion transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    /// Patch extents `(pf, ph, pw)`.
    pub patch: [usize; 3],
    /// Video extents `(F, H, W)` in cells.
    pub video: [usize; 3],
    pub channels: usize,
    pub guidance_scale: f32,
    pub mlp_ratio: usize,
    pub time_freq_dim: usize,
    /// Number of task families; one extra embedding row is the null label.
    pub task_families: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 12,
            dim: 128,
            heads: 4,
            patch: [1, 1, 1],
            video: [8, 5, 5],
            channels: 4,
            guidance_scale: 1.0,
            mlp_ratio: 2,
            time_freq_dim: 32,
            task_families: 2,
        }
    }
}

pub const PARAM_BUDGET: usize = 2_000_000;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.heads == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return bad("layers, heads, channels and mlp_ratio must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.dim < 6 || self.dim % 2 != 0 {
            return bad(format!("dim {} must be even and at least 6", self.dim));
        }
        if self.time_freq_dim < 2 || self.time_freq_dim % 2 != 0 {
            return bad("time_freq_dim must be even and at least 2".into());
        }
        for (axis, (&v, &p)) in self.video.iter().zip(&self.patch).enumerate() {
            if p == 0 || v == 0 || v % p != 0 {
                return bad(format!("video extent {v} on axis {axis} not divisible by patch {p}"));
            }
        }
        Ok(())
    }

    /// Token grid `(f, h, w)`.
    pub fn grid(&self) -> [usize; 3] {
        [
            self.video[0] / self.patch[0],
            self.video[1] / self.patch[1],
            self.video[2] / self.patch[2],
        ]
    }

    pub fn tokens(&self) -> usize {
        self.grid().iter().product()
    }

    /// Features per token before embedding.
    pub fn patch_features(&self) -> usize {
        self.patch.iter().product::<usize>() * self.channels
    }

    pub fn null_task(&self) -> usize {
        self.task_families
    }

    /// Same architecture over a different frame count.
    pub fn with_frames(&self, frames: usize) -> Self {
        Self {
            video: [frames, self.video[1], self.video[2]],
            ..self.clone()
        }
    }

    /// Maps an inclusive window over a 40-layer reference stack onto this
    /// depth by proportional rounding down.
    pub fn scaled_window(&self, first: usize, last: usize) -> (usize, usize) {
        let lo = first * self.layers / 40;
        let hi = (last * self.layers / 40).max(lo).min(self.layers - 1);
        (lo, hi)
    }

    /// Default ensemble window (reference layers 20–29).
    pub fn mid_window(&self) -> (usize, usize) {
        self.scaled_window(20, 29)
    }

    /// Early window (reference layers 0–9).
    pub fn early_window(&self) -> (usize, usize) {
        self.scaled_window(0, 9)
    }

    pub fn full_window(&self) -> (usize, usize) {
        (0, self.layers - 1)
    }

    /// Analytic parameter count for this configuration.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let hidden = d * self.mlp_ratio;
        let block = 3 * d * d + (d * d + d) + (d * hidden + hidden) + (hidden * d + d) + (d * 2 * d + 2 * d);
        let pf = self.patch_features();
        (pf * d + d)
            + (self.time_freq_dim * d + d)
            + (d * d + d)
            + (self.task_families + 1) * d
            + self.layers * block
            + (d * pf + pf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fit_the_budget() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert!(c.param_count() <= PARAM_BUDGET, "{}", c.param_count());
        assert_eq!(c.tokens(), 200);
    }

    #[test]
    fn rejects_indivisible_heads_and_patches() {
        let c = ModelConfig { heads: 3, ..Default::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { patch: [3, 1, 1], ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn windows_of_twelve_layers() {
        let c = ModelConfig::default();
        assert_eq!(c.mid_window(), (6, 8));
        assert_eq!(c.early_window(), (0, 2));
        assert_eq!(c.full_window(), (0, 11));
    }
}

use std::collections::BTreeMap;

use cost_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::maze::decode_positions;
use super::pattern::{decode_final_size, SizeClass};
use super::{Cell, TaskInstance, TaskSpec};
use crate::error::{Error, Result};

/// Mean default-weight score of unit Gaussian videos on default 5×5,
/// 8-frame mazes (measured 0.343 over 20 000 instances), rounded up and
/// frozen as the floor a working model must clear.
pub const CHANCE_BOUND: f64 = 0.35;

/// Weights of the maze components in the total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreWeights {
    pub reach_goal: f64,
    pub path_validity: f64,
    pub wall_avoidance: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self { reach_goal: 1.0, path_validity: 1.0, wall_avoidance: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoded {
    Positions(Vec<Cell>),
    Size(SizeClass),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    pub decoded: Decoded,
}

/// Scores a generated video `(F, H, W, C)` against an instance. Maze videos
/// may have any frame count; a single frame has no transitions and counts
/// as fully valid.
pub fn score(video: &Tensor<f32>, instance: &TaskInstance, weights: &ScoreWeights) -> Result<ScoreReport> {
    let s = video.shape();
    let t = instance.target.shape();
    if s.len() != 4 || s[1..] != t[1..] {
        return Err(Error::Shape(format!("video {s:?} does not match instance frames {:?}", &t[1..])));
    }
    if let Some(bad) = video.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Task(format!("cannot score a video containing {bad}")));
    }
    match &instance.spec {
        TaskSpec::Maze(m) => {
            let pos = decode_positions(video)?;
            let reach = f64::from(u8::from(*pos.last().expect("frames") == m.goal));
            let pairs = pos.len() - 1;
            let validity = if pairs == 0 {
                1.0
            } else {
                pos.windows(2)
                    .filter(|w| w[0].0.abs_diff(w[1].0) + w[0].1.abs_diff(w[1].1) <= 1)
                    .count() as f64
                    / pairs as f64
            };
            let avoid = pos.iter().filter(|&&c| !m.is_wall(c)).count() as f64 / pos.len() as f64;
            let w = weights;
            let norm = w.reach_goal + w.path_validity + w.wall_avoidance;
            if norm <= 0.0 || [w.reach_goal, w.path_validity, w.wall_avoidance].iter().any(|x| *x < 0.0) {
                return Err(Error::Task("score weights must be non-negative with a positive sum".into()));
            }
            let total = (w.reach_goal * reach + w.path_validity * validity + w.wall_avoidance * avoid) / norm;
            let components = BTreeMap::from([
                ("reach_goal".to_string(), reach),
                ("path_validity".to_string(), validity),
                ("wall_avoidance".to_string(), avoid),
            ]);
            Ok(ScoreReport { total, components, decoded: Decoded::Positions(pos) })
        }
        TaskSpec::Pattern(p) => {
            let size = decode_final_size(video)?;
            let correct = f64::from(u8::from(size == p.hidden));
            Ok(ScoreReport {
                total: correct,
                components: BTreeMap::from([("correct_completion".to_string(), correct)]),
                decoded: Decoded::Size(size),
            })
        }
    }
}

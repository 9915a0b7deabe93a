//! Symbolic grid-video reasoning tasks with exact generators, oracles and
//! scorers.

mod maze;
mod pattern;
mod score;

use cost_tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::Conditioning;

pub use maze::{
    bfs_oracle, decode_positions, gen_maze_spec, path_is_valid, render_frames, render_maze, MazeParams, MazeSpec,
};
pub use pattern::{continue_cycle, decode_final_size, gen_pattern_spec, render_pattern, PatternSpec, SizeClass};
pub use score::{score, Decoded, CHANCE_BOUND, ScoreReport, ScoreWeights};

/// `(row, column)`.
pub type Cell = (usize, usize);

/// Model-space value of an "on" cell.
pub const HIGH: f32 = 1.0;
/// Model-space value of an "off" cell.
pub const LOW: f32 = -1.0;

/// Channel layout shared by all families. The pattern task draws its disc in
/// the first channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Wall = 0,
    Agent = 1,
    Goal = 2,
    Unused = 3,
}

impl Channel {
    pub const COUNT: usize = 4;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Maze,
    Pattern,
}

impl Family {
    /// Row of the task embedding table.
    pub fn label(self) -> usize {
        match self {
            Family::Maze => 0,
            Family::Pattern => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskSpec {
    Maze(MazeSpec),
    Pattern(PatternSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub family: Family,
    /// Seed of the stream the instance was drawn from.
    pub seed: u64,
    /// Leading frames given to the model, `(k, H, W, C)`.
    pub condition: Tensor<f32>,
    /// Ground-truth video `(F, H, W, C)`.
    pub target: Tensor<f32>,
    pub spec: TaskSpec,
    pub id: String,
}

/// JSON sidecar written next to an instance's tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSidecar {
    pub id: String,
    pub family: Family,
    pub seed: u64,
    pub spec: TaskSpec,
}

fn instance_id(family: Family, spec: &TaskSpec, target: &Tensor<f32>) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&(family, spec)).expect("spec serializes"));
    for v in target.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn leading_frames(video: &Tensor<f32>, k: usize) -> Result<Tensor<f32>> {
    let s = video.shape();
    let per: usize = s[1..].iter().product();
    let mut shape = s.to_vec();
    shape[0] = k;
    Ok(Tensor::new(shape, video.data()[..k * per].to_vec())?)
}

impl TaskInstance {
    fn build(family: Family, seed: u64, spec: TaskSpec, target: Tensor<f32>, cond_frames: usize) -> Result<Self> {
        let condition = leading_frames(&target, cond_frames)?;
        let id = instance_id(family, &spec, &target);
        Ok(Self { family, seed, condition, target, spec, id })
    }

    pub fn frames(&self) -> usize {
        self.target.shape()[0]
    }

    pub fn cond_frames(&self) -> usize {
        self.condition.shape()[0]
    }

    pub fn maze(&self) -> Option<&MazeSpec> {
        match &self.spec {
            TaskSpec::Maze(m) => Some(m),
            TaskSpec::Pattern(_) => None,
        }
    }

    pub fn sidecar(&self) -> InstanceSidecar {
        InstanceSidecar { id: self.id.clone(), family: self.family, seed: self.seed, spec: self.spec.clone() }
    }
}

pub fn gen_maze(rng: &mut Rng, size: usize, frames: usize) -> Result<TaskInstance> {
    gen_maze_with(rng, &MazeParams { size, frames, ..Default::default() })
}

pub fn gen_maze_with(rng: &mut Rng, params: &MazeParams) -> Result<TaskInstance> {
    let seed = rng.seed();
    let spec = gen_maze_spec(rng, params)?;
    let target = render_maze(&spec, params.frames)?;
    TaskInstance::build(Family::Maze, seed, TaskSpec::Maze(spec), target, 1)
}

pub fn gen_pattern(rng: &mut Rng, frames: usize) -> Result<TaskInstance> {
    let seed = rng.seed();
    let spec = gen_pattern_spec(rng, frames)?;
    let target = render_pattern(&spec)?;
    TaskInstance::build(Family::Pattern, seed, TaskSpec::Pattern(spec), target, frames - 1)
}

/// Instance `index` of a split: drawn from its own derived stream, so any
/// subset can be regenerated independently.
pub fn maze_instance(split_seed: u64, index: u64, params: &MazeParams) -> Result<TaskInstance> {
    gen_maze_with(&mut Rng::derive(split_seed, index), params)
}

pub fn pattern_instance(split_seed: u64, index: u64, frames: usize) -> Result<TaskInstance> {
    gen_pattern(&mut Rng::derive(split_seed, index), frames)
}

/// Stacks `(F, H, W, C)` videos into `(B, F, H, W, C)`.
pub fn stack(videos: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = videos.first().ok_or_else(|| Error::Task("empty batch".into()))?;
    let mut data = Vec::with_capacity(first.numel() * videos.len());
    for v in videos {
        if v.shape() != first.shape() {
            return Err(Error::Shape(format!("cannot stack {:?} with {:?}", v.shape(), first.shape())));
        }
        data.extend_from_slice(v.data());
    }
    let mut shape = vec![videos.len()];
    shape.extend_from_slice(first.shape());
    Ok(Tensor::new(shape, data)?)
}

/// Splits `(B, F, H, W, C)` into per-instance videos.
pub fn unstack(batch: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    let s = batch.shape();
    let per: usize = s[1..].iter().product();
    batch
        .data()
        .chunks(per)
        .map(|c| Ok(Tensor::new(s[1..].to_vec(), c.to_vec())?))
        .collect()
}

/// Conditioning bundle for a batch of instances of one family.
pub fn conditioning(instances: &[&TaskInstance]) -> Result<Conditioning> {
    let frames: Vec<&Tensor<f32>> = instances.iter().map(|i| &i.condition).collect();
    let task = instances.iter().map(|i| i.family.label()).collect();
    Conditioning::new(stack(&frames)?, task)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_differ_between_instances() {
        let a = maze_instance(1, 0, &MazeParams::default()).unwrap();
        let b = maze_instance(1, 1, &MazeParams::default()).unwrap();
        assert_ne!(a.id, b.id);
        assert_eq!(a.id.len(), 16);
        assert_eq!(a, maze_instance(1, 0, &MazeParams::default()).unwrap());
    }

    #[test]
    fn condition_is_leading_target_frame() {
        let m = maze_instance(2, 0, &MazeParams::default()).unwrap();
        let per = 5 * 5 * 4;
        assert_eq!(m.condition.data(), &m.target.data()[..per]);
        let p = pattern_instance(2, 0, 8).unwrap();
        assert_eq!(p.cond_frames(), 7);
    }

    #[test]
    fn stack_round_trip() {
        let a = maze_instance(3, 0, &MazeParams::default()).unwrap();
        let b = maze_instance(3, 1, &MazeParams::default()).unwrap();
        let s = stack(&[&a.target, &b.target]).unwrap();
        assert_eq!(s.shape(), &[2, 8, 5, 5, 4]);
        assert_eq!(unstack(&s).unwrap(), vec![a.target, b.target]);
    }
}

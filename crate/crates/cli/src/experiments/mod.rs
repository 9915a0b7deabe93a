//! Experiment orchestration: one entry point per CLI verb, each returning a
//! report and writing its artifacts under the output directory.

mod ensemble;
mod eval;
mod frames;
mod perturb;
mod swap;
mod train;
mod visual;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cost_core::flow::{euler_sample, Conditioning, LatentIntervention, SampleTrace, Schedule};
use cost_core::model::Dit;
use cost_core::tasks::{conditioning, maze_instance, pattern_instance, score, Family, TaskInstance};
use cost_tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::report::{InstanceScore, Report};

pub use ensemble::{ablate_window, ensemble};
pub use eval::{eval, sample};
pub use frames::ablate_frames;
pub use perturb::{cka, cka_sweep, middle_half, perturb, CkaSweep};
pub use swap::swap;
pub use train::{train, train_model, TrainOutcome};
pub use visual::energy;

/// Every experiment the runner can dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Train,
    Eval,
    Sample,
    Perturb,
    Cka,
    Energy,
    Swap,
    Ensemble,
    AblateWindow,
    AblateFrames,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Train => "train",
            Experiment::Eval => "eval",
            Experiment::Sample => "sample",
            Experiment::Perturb => "perturb",
            Experiment::Cka => "cka",
            Experiment::Energy => "energy",
            Experiment::Swap => "swap",
            Experiment::Ensemble => "ensemble",
            Experiment::AblateWindow => "ablate-window",
            Experiment::AblateFrames => "ablate-frames",
        }
    }
}

/// Shared state of one invocation.
pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// Progress lines go to stderr when set.
    pub verbose: bool,
    started: Instant,
}

impl Ctx {
    pub fn new(cfg: ExperimentConfig, out: Option<PathBuf>, checkpoint: Option<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let out = out.unwrap_or_else(|| cfg.output_dir.clone());
        std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
        Ok(Self { cfg, out, checkpoint, verbose: false, started: Instant::now() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("[{:>7.1}s] {}", self.started.elapsed().as_secs_f64(), msg.as_ref());
        }
    }

    /// The trained model; analysis modes refuse to run without one.
    pub fn trained_model(&self) -> Result<Dit<f32>> {
        let path = self
            .checkpoint
            .as_deref()
            .ok_or_else(|| CliError::MissingCheckpoint("this experiment needs --checkpoint".into()))?;
        let (mut model, _) = checkpoint::load(path)?;
        if model.config.video[1..] != self.cfg.model.video[1..] || model.config.channels != self.cfg.model.channels {
            return Err(CliError::Checkpoint(format!(
                "checkpoint grid {:?} does not match config {:?}",
                model.config.video, self.cfg.model.video
            )));
        }
        model.config.guidance_scale = self.cfg.model.guidance_scale;
        Ok(model)
    }

    fn finish(&self, mut report: Report, artifacts: Vec<String>) -> Result<Report> {
        report.artifacts = artifacts;
        report.wall_clock_secs = self.started.elapsed().as_secs_f64();
        report.verify_aggregate()?;
        report.write(&self.path("report.json"))?;
        Ok(report)
    }
}

/// Runs `which` and writes `report.json` into the output directory.
pub fn run(which: Experiment, ctx: &Ctx) -> Result<Report> {
    match which {
        Experiment::Train => train(ctx).map(|(r, _)| r),
        Experiment::Eval => eval(ctx),
        Experiment::Sample => sample(ctx),
        Experiment::Perturb => perturb(ctx),
        Experiment::Cka => cka(ctx),
        Experiment::Energy => energy(ctx),
        Experiment::Swap => swap(ctx),
        Experiment::Ensemble => ensemble(ctx),
        Experiment::AblateWindow => ablate_window(ctx),
        Experiment::AblateFrames => ablate_frames(ctx),
    }
}

/// Held-out instance `index` of the configured family and split.
pub fn held_out_instance(cfg: &ExperimentConfig, index: u64) -> Result<TaskInstance> {
    Ok(match cfg.task.family {
        Family::Maze => maze_instance(cfg.task.split_seed, index, &cfg.maze_params())?,
        Family::Pattern => pattern_instance(cfg.task.split_seed, index, cfg.model.video[0])?,
    })
}

pub fn held_out(cfg: &ExperimentConfig, count: usize) -> Result<Vec<(u64, TaskInstance)>> {
    (0..count as u64).map(|i| Ok((i, held_out_instance(cfg, i)?))).collect()
}

/// Sampling seed of batch `chunk`; fixed by the base seed and batch layout.
pub fn batch_seed(seed: u64, chunk: usize) -> u64 {
    Rng::derive(seed, chunk as u64).next_u64()
}

pub fn cond_of(batch: &[(u64, TaskInstance)]) -> Result<Conditioning> {
    Ok(conditioning(&batch.iter().map(|(_, i)| i).collect::<Vec<_>>())?)
}

/// Per-instance final videos `(F, H, W, C)` of a batched trace.
pub fn videos(trace: &SampleTrace) -> Result<Vec<Tensor<f32>>> {
    Ok(cost_core::tasks::unstack(trace.final_video())?)
}

pub fn score_one(ctx: &Ctx, index: u64, inst: &TaskInstance, video: &Tensor<f32>) -> Result<InstanceScore> {
    let r = score(video, inst, &ctx.cfg.eval.weights)?;
    Ok(InstanceScore { id: inst.id.clone(), index, score: r.total, components: r.components })
}

/// Samples every instance in configured batches and scores the results.
pub fn sample_and_score(
    ctx: &Ctx,
    model: &Dit<f32>,
    instances: &[(u64, TaskInstance)],
    frames: usize,
    schedule: &Schedule,
    interventions: &[&dyn LatentIntervention],
) -> Result<(Vec<InstanceScore>, Vec<SampleTrace>)> {
    let mut scores = Vec::with_capacity(instances.len());
    let mut traces = Vec::new();
    for (chunk, batch) in instances.chunks(ctx.cfg.eval.batch_size).enumerate() {
        let cond = cond_of(batch)?;
        let trace = euler_sample(model, &cond, frames, batch_seed(ctx.cfg.seed, chunk), schedule, None, interventions)?;
        for ((index, inst), video) in batch.iter().zip(videos(&trace)?) {
            scores.push(score_one(ctx, *index, inst, &video)?);
        }
        traces.push(trace);
        ctx.log(format!("sampled {}/{}", scores.len(), instances.len()));
    }
    Ok((scores, traces))
}

/// Mean of each score component across instances.
pub fn component_stats(scores: &[InstanceScore]) -> BTreeMap<String, crate::report::Stat> {
    let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in scores {
        for (k, v) in &s.components {
            by.entry(k.clone()).or_default().push(*v);
        }
    }
    by.into_iter().filter_map(|(k, v)| crate::report::Stat::of(&v).map(|s| (k, s))).collect()
}

pub(crate) fn rel(out: &Path, path: &Path) -> String {
    path.strip_prefix(out).unwrap_or(path).display().to_string()
}

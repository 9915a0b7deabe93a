use std::time::Instant;

use cost_core::flow::{train_step, TrainBatch, TrainOptions};
use cost_core::model::Dit;
use cost_core::tasks::{maze_instance, pattern_instance, stack, TaskInstance};
use cost_tensor::{AdamConfig, AdamState, Rng};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{component_stats, held_out, rel, sample_and_score, Ctx};
use crate::checkpoint;
use crate::config::{ExperimentConfig, TrainConfig};
use crate::error::Result;
use crate::report::Report;

/// Tag mixed into the training split seed for pattern batches.
const PATTERN_STREAM: u64 = 0x7061_7474;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f32,
}

pub struct TrainOutcome {
    pub model: Dit<f32>,
    pub steps: usize,
    pub losses: Vec<LossPoint>,
    pub secs: f64,
}

/// Multiplier on the base rate: linear warm-up, flat, then a linear ramp to
/// zero over the last `decay_fraction` of the run.
pub fn lr_factor(step: usize, t: &TrainConfig) -> f64 {
    let warm = if t.warmup > 0 { ((step + 1) as f64 / t.warmup as f64).min(1.0) } else { 1.0 };
    let total = t.steps as f64;
    let start = total * (1.0 - t.decay_fraction);
    let decay = if t.decay_fraction > 0.0 && step as f64 >= start {
        ((total - step as f64) / (total - start)).clamp(0.0, 1.0)
    } else {
        1.0
    };
    warm * decay
}

/// Trains from scratch. Batches are drawn from fresh instances of the
/// training split, so no instance repeats within a run.
pub fn train_model(cfg: &ExperimentConfig, mut log: impl FnMut(&str)) -> Result<TrainOutcome> {
    let t = &cfg.train;
    let mut rng = Rng::new(cfg.seed);
    let mut model = Dit::new(cfg.model.clone(), &mut rng)?;
    let adam = AdamConfig { lr: t.lr, ..Default::default() };
    let mut opt = AdamState::new(model.named_params().into_iter().map(|(_, p)| p), adam);
    let params = cfg.maze_params();
    let opts = TrainOptions { cond_dropout: t.cond_dropout };
    let frames = cfg.model.video[0];
    let started = Instant::now();
    let mut losses = Vec::new();
    let mut next = 0u64;
    let mut steps = 0;
    for step in 0..t.steps {
        if t.time_budget_secs.is_some_and(|b| started.elapsed().as_secs_f64() >= b) {
            break;
        }
        opt.config.lr = t.lr * lr_factor(step, t);
        let pattern = t.pattern_fraction > 0.0 && rng.bernoulli(t.pattern_fraction);
        let batch: Vec<TaskInstance> = (0..t.batch_size)
            .map(|_| {
                next += 1;
                if pattern {
                    pattern_instance(t.split_seed ^ PATTERN_STREAM, next, frames)
                } else {
                    maze_instance(t.split_seed, next, &params)
                }
            })
            .collect::<cost_core::Result<_>>()?;
        let x0 = stack(&batch.iter().map(|i| &i.target).collect::<Vec<_>>())?;
        let tb = TrainBatch {
            x0,
            task: batch.iter().map(|i| i.family.label()).collect(),
            cond_frames: batch[0].cond_frames(),
        };
        let loss = train_step(&mut model, &tb, &mut rng, &mut opt, &opts)?;
        steps += 1;
        if step % t.log_every.max(1) == 0 || step + 1 == t.steps {
            losses.push(LossPoint { step, loss });
            log(&format!("step {step} loss {loss:.5}"));
        }
    }
    Ok(TrainOutcome { model, steps, losses, secs: started.elapsed().as_secs_f64() })
}

/// Trains, saves `checkpoint.cost`, and optionally evaluates on the
/// held-out split.
pub fn train(ctx: &Ctx) -> Result<(Report, Dit<f32>)> {
    let cfg = &ctx.cfg;
    let outcome = train_model(cfg, |m| ctx.log(m))?;
    let ckpt = ctx.path("checkpoint.cost");
    checkpoint::save(&ckpt, &outcome.model, outcome.steps as u64, &cfg.hash())?;
    let mut scores = Vec::new();
    if cfg.train.eval_after {
        let instances = held_out(cfg, cfg.task.count)?;
        scores = sample_and_score(ctx, &outcome.model, &instances, cfg.model.video[0], &cfg.schedule, &[])?.0;
    }
    let payload = json!({
        "steps_completed": outcome.steps,
        "train_secs": outcome.secs,
        "losses": outcome.losses,
        "components": component_stats(&scores),
        "param_count": outcome.model.param_count(),
    });
    let report = Report::new("train", &cfg.hash(), vec![cfg.seed], scores, payload);
    let report = ctx.finish(report, vec![rel(&ctx.out, &ckpt)])?;
    Ok((report, outcome.model))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_warms_holds_and_decays() {
        let t = TrainConfig { steps: 100, warmup: 10, decay_fraction: 0.2, ..Default::default() };
        assert!((lr_factor(0, &t) - 0.1).abs() < 1e-12);
        assert_eq!(lr_factor(9, &t), 1.0);
        assert_eq!(lr_factor(79, &t), 1.0);
        assert_eq!(lr_factor(80, &t), 1.0);
        assert!((lr_factor(90, &t) - 0.5).abs() < 1e-12);
        assert!((lr_factor(99, &t) - 0.05).abs() < 1e-12);
        let flat = TrainConfig { steps: 100, warmup: 0, decay_fraction: 0.0, ..Default::default() };
        assert!((0..100).all(|s| lr_factor(s, &flat) == 1.0));
    }
}

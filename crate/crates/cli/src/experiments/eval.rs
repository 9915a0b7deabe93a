use cost_core::model::Dit;
use cost_core::tasks::score;
use cost_tensor::{Rng, Tensor};
use serde_json::json;

use super::{component_stats, held_out, rel, sample_and_score, Ctx};
use crate::error::{CliError, Result};
use crate::report::{Report, Stat};
use crate::tensorfile;

/// The checkpointed model, or a freshly initialized one when no checkpoint
/// is given (reported as untrained).
fn model_or_untrained(ctx: &Ctx) -> Result<(Dit<f32>, bool)> {
    if ctx.checkpoint.is_some() {
        Ok((ctx.trained_model()?, false))
    } else {
        Ok((Dit::new(ctx.cfg.model.clone(), &mut Rng::new(ctx.cfg.seed))?, true))
    }
}

/// Mean score of unit Gaussian videos on the same instances.
fn chance(ctx: &Ctx, instances: &[(u64, cost_core::tasks::TaskInstance)]) -> Result<Stat> {
    let mut rng = Rng::derive(ctx.cfg.seed, 0x6368_616e_6365);
    let mut scores = Vec::with_capacity(instances.len());
    for (_, inst) in instances {
        let v: Tensor<f32> = rng.gaussian(inst.target.shape().to_vec())?;
        scores.push(score(&v, inst, &ctx.cfg.eval.weights)?.total);
    }
    Stat::of(&scores).ok_or_else(|| CliError::Report("no instances".into()))
}

pub fn eval(ctx: &Ctx) -> Result<Report> {
    let cfg = &ctx.cfg;
    let (model, untrained) = model_or_untrained(ctx)?;
    let instances = held_out(cfg, cfg.task.count)?;
    let (scores, _) = sample_and_score(ctx, &model, &instances, cfg.model.video[0], &cfg.schedule, &[])?;
    let payload = json!({
        "untrained": untrained,
        "components": component_stats(&scores),
        "chance": chance(ctx, &instances)?,
        "n_steps": cfg.schedule.n_steps(),
    });
    ctx.finish(Report::new("eval", &cfg.hash(), vec![cfg.seed], scores, payload), vec![])
}

/// Like `eval`, and also writes each final video and its `x̂₀` trajectory
/// as tensor files with a JSON sidecar per instance.
pub fn sample(ctx: &Ctx) -> Result<Report> {
    let cfg = &ctx.cfg;
    let (model, untrained) = model_or_untrained(ctx)?;
    let instances = held_out(cfg, cfg.task.count)?;
    let (scores, traces) = sample_and_score(ctx, &model, &instances, cfg.model.video[0], &cfg.schedule, &[])?;
    let dir = ctx.path("samples");
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut artifacts = Vec::new();
    let mut batches = instances.chunks(cfg.eval.batch_size).zip(&traces);
    let mut write = |name: String, t: &Tensor<f32>| -> Result<()> {
        let p = dir.join(name);
        tensorfile::write(&p, t)?;
        artifacts.push(rel(&ctx.out, &p));
        Ok(())
    };
    let mut sidecars = Vec::new();
    for (batch, trace) in batches.by_ref() {
        let finals = super::videos(trace)?;
        let per_step: Vec<Vec<Tensor<f32>>> =
            trace.x0_hat.iter().map(cost_core::tasks::unstack).collect::<cost_core::Result<_>>()?;
        for (b, ((_, inst), video)) in batch.iter().zip(finals).enumerate() {
            write(format!("{}.video.cost", inst.id), &video)?;
            let mut traj = Vec::new();
            for step in &per_step {
                traj.extend_from_slice(step[b].data());
            }
            let mut shape = vec![per_step.len()];
            shape.extend_from_slice(video.shape());
            write(format!("{}.x0hat.cost", inst.id), &Tensor::new(shape, traj)?)?;
            sidecars.push((inst.id.clone(), inst.sidecar()));
        }
    }
    for (id, sc) in sidecars {
        let p = dir.join(format!("{id}.json"));
        std::fs::write(&p, serde_json::to_vec_pretty(&sc)?).map_err(|e| CliError::io(&p, e))?;
        artifacts.push(rel(&ctx.out, &p));
    }
    let payload = json!({ "untrained": untrained, "components": component_stats(&scores) });
    ctx.finish(Report::new("sample", &cfg.hash(), vec![cfg.seed], scores, payload), artifacts)
}

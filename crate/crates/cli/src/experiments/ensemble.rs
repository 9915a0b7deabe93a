use cost_core::model::Dit;
use cost_core::probe::{ensemble_sample, EnsembleConfig, EnsembleMode};
use cost_core::tasks::TaskInstance;
use serde_json::json;

use super::{batch_seed, cond_of, held_out, sample_and_score, score_one, videos, Ctx};
use crate::config::Window;
use crate::error::Result;
use crate::report::{InstanceScore, Report, Stat};
use crate::stats::paired_greater;

/// Scores of the base-seed member, plus the mean score over members, per
/// instance. Member 0 shares its initial noise with the single-seed run of
/// the same batch, so the two are paired.
fn ensemble_scores(
    ctx: &Ctx,
    model: &Dit<f32>,
    instances: &[(u64, TaskInstance)],
    window: (usize, usize),
) -> Result<(Vec<InstanceScore>, Vec<f64>)> {
    let cfg = &ctx.cfg;
    let spec = &cfg.ensemble;
    let mut base = Vec::new();
    let mut member_mean = Vec::new();
    for (chunk, batch) in instances.chunks(cfg.eval.batch_size).enumerate() {
        let cond = cond_of(batch)?;
        let seed = batch_seed(cfg.seed, chunk);
        let ecfg = EnsembleConfig {
            seeds: (0..spec.k as u64).map(|j| seed.wrapping_add(j)).collect(),
            layer_window: window,
            step_window: spec.steps.clone(),
            timeout_secs: spec.timeout_secs,
        };
        let traces = ensemble_sample(model, &cond, cfg.model.video[0], &ecfg, &cfg.schedule, &[], EnsembleMode::Concurrent)?;
        let mut sums = vec![0.0; batch.len()];
        for (m, trace) in traces.iter().enumerate() {
            for (b, ((i, inst), v)) in batch.iter().zip(videos(trace)?).enumerate() {
                let s = score_one(ctx, *i, inst, &v)?;
                sums[b] += s.score / traces.len() as f64;
                if m == 0 {
                    base.push(s);
                }
            }
        }
        member_mean.extend(sums);
        ctx.log(format!("ensemble {window:?}: {}/{}", base.len(), instances.len()));
    }
    Ok((base, member_mean))
}

/// Scores ordered by instance index, for pairing.
fn by_index(scores: &[InstanceScore]) -> Vec<f64> {
    let mut v: Vec<(u64, f64)> = scores.iter().map(|s| (s.index, s.score)).collect();
    v.sort_by_key(|p| p.0);
    v.into_iter().map(|p| p.1).collect()
}

fn diffs(a: &[f64], b: &[f64], shift: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y + shift).collect()
}

/// Configured ensemble against single-seed sampling on the same instances.
pub fn ensemble(ctx: &Ctx) -> Result<Report> {
    let cfg = &ctx.cfg;
    let model = ctx.trained_model()?;
    let instances = held_out(cfg, cfg.task.count)?;
    let window = cfg.ensemble.window.resolve(&model.config);
    let (single, _) = sample_and_score(ctx, &model, &instances, cfg.model.video[0], &cfg.schedule, &[])?;
    let (ens, member_mean) = ensemble_scores(ctx, &model, &instances, window)?;
    let (s, e) = (by_index(&single), by_index(&ens));
    let payload = json!({
        "n": instances.len(),
        "k": cfg.ensemble.k,
        "window": cfg.ensemble.window.label(),
        "layers": [window.0, window.1],
        "steps": cfg.ensemble.steps,
        "single": Stat::of(&s),
        "ensemble": Stat::of(&e),
        "member_mean": Stat::of(&member_mean),
        "margin": cfg.ensemble.margin,
        "noninferiority": paired_greater(&diffs(&e, &s, cfg.ensemble.margin)),
        "superiority": paired_greater(&diffs(&e, &s, 0.0)),
    });
    ctx.finish(Report::new("ensemble", &cfg.hash(), vec![cfg.seed], ens, payload), vec![])
}

/// Early, full and mid windows against the single-seed baseline.
pub fn ablate_window(ctx: &Ctx) -> Result<Report> {
    let cfg = &ctx.cfg;
    let model = ctx.trained_model()?;
    let count = cfg.ensemble.ablation_count.unwrap_or(cfg.task.count);
    let instances = held_out(cfg, count)?;
    let (single, _) = sample_and_score(ctx, &model, &instances, cfg.model.video[0], &cfg.schedule, &[])?;
    let s = by_index(&single);
    let mut rows = Vec::new();
    let mut means = std::collections::BTreeMap::new();
    let mut mid_scores = Vec::new();
    for w in [Window::Early, Window::Full, Window::Mid] {
        let layers = w.resolve(&model.config);
        let (ens, _) = ensemble_scores(ctx, &model, &instances, layers)?;
        let e = by_index(&ens);
        means.insert(w.label(), Stat::of(&e).map_or(f64::NAN, |st| st.mean));
        rows.push(json!({
            "window": w.label(),
            "layers": [layers.0, layers.1],
            "score": Stat::of(&e),
            "vs_single": paired_greater(&diffs(&e, &s, 0.0)),
        }));
        if w == Window::Mid {
            mid_scores = ens;
        }
    }
    let ordered = means["mid"] >= means["early"];
    let payload = json!({
        "n": instances.len(),
        "k": cfg.ensemble.k,
        "single": Stat::of(&s),
        "windows": rows,
        "mid_at_least_early": ordered,
        "deviation": if ordered {
            None
        } else {
            Some(format!("mid window ({:.4}) scored below early window ({:.4})", means["mid"], means["early"]))
        },
    });
    ctx.finish(Report::new("ablate-window", &cfg.hash(), vec![cfg.seed], mid_scores, payload), vec![])
}

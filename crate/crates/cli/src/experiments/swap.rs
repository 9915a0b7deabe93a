use cost_core::flow::euler_sample;
use cost_core::probe::{is_flip, layer_swap_sweep};
use cost_core::tasks::{maze_instance, TaskInstance};
use serde_json::json;

use super::{batch_seed, cond_of, held_out, rel, score_one, videos, Ctx};
use crate::error::{CliError, Result};
use crate::image::line_chart;
use crate::report::{Report, Stat};

/// Donor for each recipient: the next donor-split maze whose goal differs.
fn donors(ctx: &Ctx, recipients: &[(u64, TaskInstance)]) -> Result<Vec<(u64, TaskInstance)>> {
    let params = ctx.cfg.maze_params();
    let mut next = 0u64;
    recipients
        .iter()
        .map(|(_, r)| {
            let goal = r.maze().map(|m| m.goal);
            loop {
                let d = maze_instance(ctx.cfg.swap.donor_split_seed, next, &params)?;
                next += 1;
                if d.maze().map(|m| m.goal) != goal {
                    return Ok((next - 1, d));
                }
                if next > 1_000_000 {
                    return Err(CliError::Report("no donor with a different goal".into()));
                }
            }
        })
        .collect()
}

/// Layer sweep of latent swaps at one step over recipient/donor pairs.
pub fn swap(ctx: &Ctx) -> Result<Report> {
    let cfg = &ctx.cfg;
    if cfg.task.family != cost_core::tasks::Family::Maze {
        return Err(CliError::Config { key: "task.family".into(), reason: "swap flips are defined for mazes".into() });
    }
    let model = ctx.trained_model()?;
    let layers: Vec<usize> = cfg.swap.layers.clone().unwrap_or_else(|| (0..model.config.layers).collect());
    let recipients = held_out(cfg, cfg.swap.pairs)?;
    let donor_set = donors(ctx, &recipients)?;
    let frames = cfg.model.video[0];
    let mut flips = vec![Vec::new(); layers.len()];
    let mut clean_flips = Vec::new();
    let mut donor_reach = Vec::new();
    let mut scores = Vec::new();
    for (chunk, (rb, db)) in
        recipients.chunks(cfg.swap.batch_size).zip(donor_set.chunks(cfg.swap.batch_size)).enumerate()
    {
        let (rc, dc) = (cond_of(rb)?, cond_of(db)?);
        let seed = batch_seed(cfg.seed, chunk);
        let clean = euler_sample(&model, &rc, frames, seed, &cfg.schedule, None, &[])?;
        for (((i, r), (_, d)), v) in rb.iter().zip(db).zip(videos(&clean)?) {
            scores.push(score_one(ctx, *i, r, &v)?);
            clean_flips.push(f64::from(u8::from(is_flip(&v, r, d)?)));
        }
        let donor_run = euler_sample(&model, &dc, frames, seed, &cfg.schedule, None, &[])?;
        for ((_, d), v) in db.iter().zip(videos(&donor_run)?) {
            donor_reach.push(score_one(ctx, 0, d, &v)?.components.get("reach_goal").copied().unwrap_or(0.0));
        }
        let sweep = layer_swap_sweep(&model, &rc, &dc, frames, seed, &cfg.schedule, cfg.swap.step, &layers, cfg.swap.region)?;
        for (slot, (_, vids)) in sweep.into_iter().enumerate() {
            for ((_, r), ((_, d), v)) in rb.iter().zip(db.iter().zip(&vids)) {
                flips[slot].push(f64::from(u8::from(is_flip(v, r, d)?)));
            }
        }
        ctx.log(format!("swapped {}/{}", scores.len(), recipients.len()));
    }
    let rates: Vec<f64> = flips.iter().map(|f| f.iter().sum::<f64>() / f.len() as f64).collect();
    let curve: Vec<_> = layers
        .iter()
        .zip(&flips)
        .map(|(l, f)| json!({ "layer": l, "flip_rate": Stat::of(f) }))
        .collect();
    let peak = rates.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| layers[i]);
    let chart = ctx.path("swap_flip_rate.ppm");
    line_chart(&[rates], 16, 120)?.write(&chart)?;
    let payload = json!({
        "n": recipients.len(),
        "step": cfg.swap.step,
        "region": cfg.swap.region,
        "curve": curve,
        "peak_layer": peak,
        "baseline_flip_rate": Stat::of(&clean_flips),
        "donor_reach_rate": Stat::of(&donor_reach),
        "donor_indices": donor_set.iter().map(|(i, _)| *i).collect::<Vec<_>>(),
    });
    let seeds = vec![cfg.seed, cfg.swap.donor_split_seed];
    ctx.finish(Report::new("swap", &cfg.hash(), seeds, scores, payload), vec![rel(&ctx.out, &chart)])
}

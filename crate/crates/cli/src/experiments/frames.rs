use cost_core::flow::euler_sample;
use cost_core::tasks::{maze_instance, Family, MazeParams, TaskInstance};
use serde_json::json;

use super::{batch_seed, cond_of, score_one, videos, Ctx};
use crate::error::{CliError, Result};
use crate::report::{InstanceScore, Report, Stat};
use crate::stats::paired_greater;

/// Held-out mazes whose oracle path needs at least `min_moves` moves.
fn matched(ctx: &Ctx) -> Result<Vec<(u64, TaskInstance)>> {
    let cfg = &ctx.cfg;
    let params = MazeParams { min_moves: cfg.frames.min_moves.max(1), ..cfg.maze_params() };
    (0..cfg.task.count as u64).map(|i| Ok((i, maze_instance(cfg.task.split_seed, i, &params)?))).collect()
}

/// Samples the same tasks at several frame counts. Videos shorter than the
/// path cannot show it; a single frame is the conditioning frame alone.
pub fn ablate_frames(ctx: &Ctx) -> Result<Report> {
    let cfg = &ctx.cfg;
    if cfg.task.family != Family::Maze {
        return Err(CliError::Config { key: "task.family".into(), reason: "frame ablation uses mazes".into() });
    }
    let model = ctx.trained_model()?;
    let instances = matched(ctx)?;
    let mut per_f: Vec<(usize, Vec<InstanceScore>)> = Vec::new();
    for &f in &cfg.frames.frames {
        let mut scores = Vec::new();
        for (chunk, batch) in instances.chunks(cfg.eval.batch_size).enumerate() {
            let cond = cond_of(batch)?;
            let trace = euler_sample(&model, &cond, f, batch_seed(cfg.seed, chunk), &cfg.schedule, None, &[])?;
            for ((i, inst), v) in batch.iter().zip(videos(&trace)?) {
                scores.push(score_one(ctx, *i, inst, &v)?);
            }
        }
        ctx.log(format!("frames {f}: done"));
        per_f.push((f, scores));
    }
    let totals = |s: &[InstanceScore]| s.iter().map(|x| x.score).collect::<Vec<f64>>();
    let rows: Vec<_> = per_f
        .iter()
        .map(|(f, s)| {
            let reach: Vec<f64> = s.iter().map(|x| x.components.get("reach_goal").copied().unwrap_or(0.0)).collect();
            json!({ "frames": f, "score": Stat::of(&totals(s)), "reach_goal": Stat::of(&reach) })
        })
        .collect();
    let mut sorted: Vec<(usize, f64)> =
        per_f.iter().map(|(f, s)| (*f, totals(s).iter().sum::<f64>() / s.len() as f64)).collect();
    sorted.sort_by_key(|p| p.0);
    let monotone = sorted.windows(2).all(|w| w[1].1 >= w[0].1);
    let lo = per_f.iter().min_by_key(|p| p.0);
    let hi = per_f.iter().max_by_key(|p| p.0);
    let gate = match (lo, hi) {
        (Some((fl, sl)), Some((fh, sh))) if fl != fh => {
            let d: Vec<f64> = totals(sh).iter().zip(totals(sl)).map(|(a, b)| a - b).collect();
            json!({
                "fewest_frames": fl,
                "most_frames": fh,
                "most_at_least_fewest": sorted.last().map(|p| p.1) >= sorted.first().map(|p| p.1),
                "test": paired_greater(&d),
            })
        }
        _ => json!(null),
    };
    let scores = hi.map(|p| p.1.clone()).unwrap_or_default();
    let payload = json!({
        "n": instances.len(),
        "min_moves": cfg.frames.min_moves,
        "per_frame_count": rows,
        "monotone": monotone,
        "gate": gate,
    });
    ctx.finish(Report::new("ablate-frames", &cfg.hash(), vec![cfg.seed], scores, payload), vec![])
}

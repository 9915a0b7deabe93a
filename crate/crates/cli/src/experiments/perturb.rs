use cost_core::flow::{euler_sample, euler_sample_from, SampleTrace};
use cost_core::model::HookRegistry;
use cost_core::probe::{
    cka_matrix, sensitivity_curve, video_dissimilarity, NoiseAtFrame, NoiseAtStep, Representation, SweepPoint,
};
use cost_tensor::Tensor;
use serde_json::json;

use super::{batch_seed, cond_of, held_out, rel, score_one, videos, Ctx};
use crate::error::{CliError, Result};
use crate::image::{line_chart, write_heatmap, Scale};
use crate::report::{InstanceScore, Report, Stat};
use crate::stats::paired_greater;

fn scores_of(ctx: &Ctx, batch: &[(u64, cost_core::tasks::TaskInstance)], trace: &SampleTrace) -> Result<Vec<f64>> {
    batch
        .iter()
        .zip(videos(trace)?)
        .map(|((i, inst), v)| Ok(score_one(ctx, *i, inst, &v)?.score))
        .collect()
}

/// Steps `[n/4, 3n/4)`: the middle half of the trajectory.
pub fn middle_half(n_steps: usize) -> std::ops::Range<usize> {
    n_steps / 4..(3 * n_steps).div_ceil(4)
}

/// Step-noise and frame-noise sweeps with paired score drops and final
/// dissimilarities against the clean run.
pub fn perturb(ctx: &Ctx) -> Result<Report> {
    let cfg = &ctx.cfg;
    let model = ctx.trained_model()?;
    let instances = held_out(cfg, cfg.perturb.count)?;
    let n = cfg.schedule.n_steps();
    let frames = cfg.model.video[0];
    let cond_frames = instances[0].1.cond_frames();
    let steps: Vec<usize> = cfg.perturb.steps.clone().unwrap_or_else(|| (0..n).collect());
    let noised: Vec<usize> = cfg.perturb.frames.clone().unwrap_or_else(|| (cond_frames..frames).collect());
    let opts = cfg.perturb.options;

    let mut clean_scores: Vec<InstanceScore> = Vec::new();
    let mut step_scores = vec![Vec::new(); steps.len()];
    let mut step_dis = vec![Vec::new(); steps.len()];
    let mut frame_scores = vec![Vec::new(); noised.len()];
    let mut frame_dis = vec![Vec::new(); noised.len()];
    for (chunk, batch) in instances.chunks(cfg.eval.batch_size).enumerate() {
        let cond = cond_of(batch)?;
        let seed = batch_seed(cfg.seed, chunk);
        let noise = batch_seed(cfg.perturb.noise_seed, chunk);
        let clean = euler_sample(&model, &cond, frames, seed, &cfg.schedule, None, &[])?;
        for ((i, inst), v) in batch.iter().zip(videos(&clean)?) {
            clean_scores.push(score_one(ctx, *i, inst, &v)?);
        }
        for (slot, &k) in steps.iter().enumerate() {
            let iv = NoiseAtStep { step: k, seed: noise, options: opts };
            let run = euler_sample_from(&model, &clean, k, &cond, &[&iv])?;
            step_scores[slot].extend(scores_of(ctx, batch, &run)?);
            step_dis[slot].extend(video_dissimilarity(clean.final_video(), run.final_video())?);
        }
        for (slot, &f) in noised.iter().enumerate() {
            let iv = NoiseAtFrame { frame: f, seed: noise, options: opts };
            let run = euler_sample(&model, &cond, frames, seed, &cfg.schedule, None, &[&iv])?;
            frame_scores[slot].extend(scores_of(ctx, batch, &run)?);
            frame_dis[slot].extend(video_dissimilarity(clean.final_video(), run.final_video())?);
        }
        ctx.log(format!("perturbed {}/{}", clean_scores.len(), instances.len()));
    }
    let clean: Vec<f64> = clean_scores.iter().map(|s| s.score).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let points: Vec<SweepPoint> = steps
        .iter()
        .enumerate()
        .map(|(slot, &k)| SweepPoint {
            injection_step: k,
            clean_scores: clean.clone(),
            perturbed_scores: step_scores[slot].clone(),
            final_dissimilarity: mean(&step_dis[slot]),
        })
        .collect();
    let curve = sensitivity_curve(&points, n)?;
    let drop = |scores: &[f64]| -> Vec<f64> { clean.iter().zip(scores).map(|(c, p)| c - p).collect() };
    let frame_curve: Vec<_> = noised
        .iter()
        .enumerate()
        .map(|(slot, &f)| {
            json!({
                "frame": f,
                "score_drop": Stat::of(&drop(&frame_scores[slot])),
                "final_dissimilarity": Stat::of(&frame_dis[slot]),
            })
        })
        .collect();

    // Per-instance averages over the middle half of steps and over frames.
    let mid: Vec<usize> = steps.iter().enumerate().filter(|(_, k)| middle_half(n).contains(k)).map(|(s, _)| s).collect();
    let per_instance = |slots: &[usize], scores: &[Vec<f64>]| -> Vec<f64> {
        (0..clean.len())
            .map(|b| slots.iter().map(|&s| clean[b] - scores[s][b]).sum::<f64>() / slots.len() as f64)
            .collect()
    };
    let all_frames: Vec<usize> = (0..noised.len()).collect();
    let comparison = if mid.is_empty() || all_frames.is_empty() {
        json!(null)
    } else {
        let step_drop = per_instance(&mid, &step_scores);
        let frame_drop = per_instance(&all_frames, &frame_scores);
        let diffs: Vec<f64> = step_drop.iter().zip(&frame_drop).map(|(s, f)| s - 2.0 * f).collect();
        let (sm, fm) = (mean(&step_drop), mean(&frame_drop));
        json!({
            "middle_steps": mid.iter().map(|&s| steps[s]).collect::<Vec<_>>(),
            "step_drop": Stat::of(&step_drop),
            "frame_drop": Stat::of(&frame_drop),
            "ratio": if fm > 0.0 { Some(sm / fm) } else { None },
            "test_step_exceeds_twice_frame": paired_greater(&diffs),
        })
    };

    let mut artifacts = Vec::new();
    let chart = ctx.path("step_sensitivity.ppm");
    line_chart(&[curve.score_drop.clone(), curve.final_dissimilarity.clone()], 16, 160)?.write(&chart)?;
    artifacts.push(rel(&ctx.out, &chart));
    if !noised.is_empty() {
        let fchart = ctx.path("frame_sensitivity.ppm");
        let fd: Vec<f64> = (0..noised.len()).map(|s| mean(&drop(&frame_scores[s]))).collect();
        let fdis: Vec<f64> = frame_dis.iter().map(|d| mean(d)).collect();
        line_chart(&[fd, fdis], 24, 160)?.write(&fchart)?;
        artifacts.push(rel(&ctx.out, &fchart));
    }
    let payload = json!({
        "n": clean.len(),
        "step_curve": curve,
        "frame_curve": frame_curve,
        "comparison": comparison,
        "options": opts,
    });
    let seeds = vec![cfg.seed, cfg.perturb.noise_seed];
    ctx.finish(Report::new("perturb", &cfg.hash(), seeds, clean_scores, payload), artifacts)
}

/// Result of a CKA sweep, beyond what the report carries.
pub struct CkaSweep {
    /// `(injection steps, n_steps)` mean over instances.
    pub values: Tensor<f64>,
    pub per_instance: Vec<Tensor<f64>>,
    pub injection_steps: Vec<usize>,
}

pub fn cka_sweep(ctx: &Ctx, model: &cost_core::model::Dit<f32>) -> Result<(CkaSweep, Vec<InstanceScore>)> {
    let cfg = &ctx.cfg;
    let instances = held_out(cfg, cfg.cka.count)?;
    let n = cfg.schedule.n_steps();
    let frames = cfg.model.video[0];
    let inj: Vec<usize> = cfg.cka.injection_steps.clone().unwrap_or_else(|| (0..n).collect());
    if inj.is_empty() {
        return Err(CliError::Config { key: "cka.injection_steps".into(), reason: "empty".into() });
    }
    let repr = cfg.cka.representation;
    let registry = || -> Result<Option<HookRegistry>> {
        match repr {
            Representation::X0Hat => Ok(None),
            Representation::Hidden { layer } => {
                let mut h = HookRegistry::new();
                h.register_capture(&(0..n).collect::<Vec<_>>(), &[layer])?;
                Ok(Some(h))
            }
        }
    };
    let mut per_instance = Vec::new();
    let mut scores = Vec::new();
    for (chunk, batch) in instances.chunks(cfg.eval.batch_size).enumerate() {
        let cond = cond_of(batch)?;
        let seed = batch_seed(cfg.seed, chunk);
        let noise = batch_seed(cfg.cka.noise_seed, chunk);
        let mut hooks = registry()?;
        let clean = euler_sample(model, &cond, frames, seed, &cfg.schedule, hooks.as_mut(), &[])?;
        for ((i, inst), v) in batch.iter().zip(videos(&clean)?) {
            scores.push(score_one(ctx, *i, inst, &v)?);
        }
        let runs = inj
            .iter()
            .map(|&k| {
                let iv = NoiseAtStep::new(k, noise);
                Ok(match repr {
                    Representation::X0Hat => euler_sample_from(model, &clean, k, &cond, &[&iv])?,
                    Representation::Hidden { .. } => {
                        let mut h = registry()?;
                        euler_sample(model, &cond, frames, seed, &cfg.schedule, h.as_mut(), &[&iv])?
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        per_instance.extend(cka_matrix(&clean, &runs, &inj, repr)?.per_instance);
        ctx.log(format!("cka {}/{}", scores.len(), instances.len()));
    }
    let mut mean = vec![0.0f64; inj.len() * n];
    for m in &per_instance {
        for (a, v) in mean.iter_mut().zip(m.data()) {
            *a += v / per_instance.len() as f64;
        }
    }
    let values = Tensor::new([inj.len(), n], mean)?;
    Ok((CkaSweep { values, per_instance, injection_steps: inj }, scores))
}

/// Dissimilarity matrix between clean and step-noised runs, with the
/// causality check and a heatmap.
pub fn cka(ctx: &Ctx) -> Result<Report> {
    let cfg = &ctx.cfg;
    let model = ctx.trained_model()?;
    let (sweep, scores) = cka_sweep(ctx, &model)?;
    let n = cfg.schedule.n_steps();
    let zero_block = sweep.per_instance.iter().all(|m| {
        sweep.injection_steps.iter().enumerate().all(|(i, &k)| (0..k).all(|j| m.data()[i * n + j] == 0.0))
    });
    let in_range = sweep.per_instance.iter().flat_map(|m| m.data()).all(|v| (0.0..=1.0).contains(v));
    let diagonal: Vec<f64> =
        sweep.injection_steps.iter().enumerate().map(|(i, &k)| sweep.values.data()[i * n + k]).collect();
    let rows: Vec<Vec<f64>> = sweep.values.data().chunks(n).map(<[f64]>::to_vec).collect();
    let heat = ctx.path("cka.ppm");
    write_heatmap(&heat, sweep.values.data(), sweep.injection_steps.len(), n, Scale::Fixed { lo: 0.0, hi: 1.0 }, cfg.cka.cell_px)?;
    let payload = json!({
        "n": sweep.per_instance.len(),
        "representation": cfg.cka.representation,
        "injection_steps": sweep.injection_steps,
        "measure_steps": (0..n).collect::<Vec<_>>(),
        "matrix": rows,
        "diagonal": diagonal,
        "zero_block_exact": zero_block,
        "entries_in_unit_interval": in_range,
    });
    let seeds = vec![cfg.seed, cfg.cka.noise_seed];
    ctx.finish(Report::new("cka", &cfg.hash(), seeds, scores, payload), vec![rel(&ctx.out, &heat)])
}

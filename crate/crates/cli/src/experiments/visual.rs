use cost_core::flow::euler_sample;
use cost_core::model::HookRegistry;
use cost_core::probe::energy_map;
use serde_json::json;

use super::{batch_seed, cond_of, held_out_instance, rel, score_one, videos, Ctx};
use crate::error::Result;
use crate::image::{heatmap, Pixmap, Scale};
use crate::report::Report;

/// Per-layer activation energy of one held-out instance at one step: a
/// heatmap per layer (auto-scaled) plus a side-by-side strip sharing one
/// scale, frames stacked vertically.
pub fn energy(ctx: &Ctx) -> Result<Report> {
    let cfg = &ctx.cfg;
    let model = ctx.trained_model()?;
    let index = cfg.energy.instance;
    let inst = held_out_instance(cfg, index)?;
    let layers: Vec<usize> = cfg.energy.layers.clone().unwrap_or_else(|| (0..model.config.layers).collect());
    let mut hooks = HookRegistry::new();
    hooks.register_capture(&[cfg.energy.step], &layers)?;
    let batch = vec![(index, inst)];
    let cond = cond_of(&batch)?;
    let trace = euler_sample(
        &model,
        &cond,
        cfg.model.video[0],
        batch_seed(cfg.seed, 0),
        &cfg.schedule,
        Some(&mut hooks),
        &[],
    )?;
    let map = energy_map(&trace.hidden, cfg.energy.step)?;
    let [_, f, h, w] = [map.values.shape()[0], map.values.shape()[1], map.values.shape()[2], map.values.shape()[3]];
    let cell = cfg.energy.cell_px;
    let mut artifacts = Vec::new();
    let (lo, hi) = map.values.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let gap = cell;
    let mut strip = Pixmap::filled(map.layers.len() * (w * cell + gap), f * h * cell, [255; 3]);
    let mut per_frame = Vec::new();
    for (i, &layer) in map.layers.iter().enumerate() {
        let panel = map.panel(i)?;
        let vals: Vec<f64> = panel.data().iter().map(|v| *v as f64).collect();
        let img = heatmap(&vals, f * h, w, Scale::Auto, cell)?;
        let p = ctx.path(&format!("energy_layer{layer:02}.ppm"));
        img.write(&p)?;
        artifacts.push(rel(&ctx.out, &p));
        let shared = heatmap(&vals, f * h, w, Scale::Fixed { lo: lo as f64, hi: hi as f64 }, cell)?;
        for y in 0..shared.height {
            for x in 0..shared.width {
                let dst = 3 * (y * strip.width + i * (w * cell + gap) + x);
                strip.rgb[dst..dst + 3].copy_from_slice(&shared.get(x, y));
            }
        }
        let frame_means: Vec<f64> = vals.chunks(h * w).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        per_frame.push(json!({ "layer": layer, "frame_mean_energy": frame_means }));
    }
    let sp = ctx.path("energy_strip.ppm");
    strip.write(&sp)?;
    artifacts.push(rel(&ctx.out, &sp));
    let video = videos(&trace)?.remove(0);
    let scores = vec![score_one(ctx, index, &batch[0].1, &video)?];
    let payload = json!({
        "n": 1,
        "step": cfg.energy.step,
        "layers": map.layers,
        "grid": [f, h, w],
        "range": [lo, hi],
        "per_layer": per_frame,
    });
    ctx.finish(Report::new("energy", &cfg.hash(), vec![cfg.seed], scores, payload), artifacts)
}

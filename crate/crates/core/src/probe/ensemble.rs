//! Training-free multi-seed ensemble: K runs from different initial noise
//! average their block outputs inside a layer window at early steps, then
//! continue independently.

use std::sync::Arc;
use std::time::Duration;

use cost_tensor::{Eager, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{euler_sample, Conditioning, EulerRun, SampleTrace, Schedule};
use crate::model::{mean_in_order, Dit, HookRegistry, Injection, MeanGroup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub seeds: Vec<u64>,
    /// Inclusive layer range.
    pub layer_window: (usize, usize),
    pub step_window: Vec<usize>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    300
}

impl EnsembleConfig {
    /// Three seeds derived from `base`, mid window, first step only.
    pub fn mid(model: &Dit<f32>, base: u64) -> Self {
        Self {
            seeds: (0..3).map(|k| base.wrapping_add(k)).collect(),
            layer_window: model.config.mid_window(),
            step_window: vec![0],
            timeout_secs: default_timeout_secs(),
        }
    }

    pub fn k(&self) -> usize {
        self.seeds.len()
    }

    pub fn validate(&self, layers: usize, schedule: &Schedule) -> Result<()> {
        let (lo, hi) = self.layer_window;
        if self.seeds.is_empty() {
            return Err(Error::Config("ensemble needs at least one seed".into()));
        }
        if lo > hi || hi >= layers {
            return Err(Error::Config(format!("layer window {lo}..={hi} outside {layers} layers")));
        }
        if let Some(s) = self.step_window.iter().find(|&&s| s >= schedule.n_steps()) {
            return Err(Error::Config(format!("ensemble step {s} outside {} steps", schedule.n_steps())));
        }
        Ok(())
    }

    fn slots(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (lo, hi) = self.layer_window;
        self.step_window.iter().flat_map(move |&s| (lo..=hi).map(move |l| (s, l)))
    }
}

/// How the K runs are scheduled. Both produce bit-identical traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// One thread per seed, meeting at a barrier after each window layer.
    #[default]
    Concurrent,
    /// One thread driving all seeds layer by layer.
    Sequential,
}

/// Runs the ensemble and returns one trace per seed. `captures` adds
/// `(step, layer)` capture slots to every run.
pub fn ensemble_sample(
    model: &Dit<f32>,
    cond: &Conditioning,
    frames: usize,
    cfg: &EnsembleConfig,
    schedule: &Schedule,
    captures: &[(usize, usize)],
    mode: EnsembleMode,
) -> Result<Vec<SampleTrace>> {
    cfg.validate(model.config.layers, schedule)?;
    match mode {
        EnsembleMode::Concurrent => concurrent(model, cond, frames, cfg, schedule, captures),
        EnsembleMode::Sequential => sequential(model, cond, frames, cfg, schedule, captures),
    }
}

fn capture_registry(captures: &[(usize, usize)]) -> Result<HookRegistry> {
    let mut h = HookRegistry::new();
    for &(s, l) in captures {
        h.register_capture(&[s], &[l])?;
    }
    Ok(h)
}

fn concurrent(
    model: &Dit<f32>,
    cond: &Conditioning,
    frames: usize,
    cfg: &EnsembleConfig,
    schedule: &Schedule,
    captures: &[(usize, usize)],
) -> Result<Vec<SampleTrace>> {
    let group: Arc<MeanGroup> = MeanGroup::new(cfg.k(), Duration::from_secs(cfg.timeout_secs));
    let results: Vec<Result<SampleTrace>> = std::thread::scope(|scope| {
        let handles: Vec<_> = cfg
            .seeds
            .iter()
            .enumerate()
            .map(|(member, &seed)| {
                let group = group.clone();
                scope.spawn(move || {
                    let run = || -> Result<SampleTrace> {
                        let mut hooks = capture_registry(captures)?;
                        for (s, l) in cfg.slots() {
                            hooks.inject(s, l, Injection::GroupMean { group: group.clone(), member })?;
                        }
                        euler_sample(model, cond, frames, seed, schedule, Some(&mut hooks), &[])
                    };
                    let out = run();
                    if out.is_err() {
                        group.abort();
                    }
                    out
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Hook("ensemble worker panicked".into()))))
            .collect()
    });
    // Report the root cause rather than the aborts it triggered.
    if results.iter().any(|r| r.is_err()) {
        let mut errs: Vec<Error> = results.into_iter().filter_map(|r| r.err()).collect();
        let root = errs
            .iter()
            .position(|e| !matches!(e, Error::Hook(m) if m.contains("aborted")))
            .unwrap_or(0);
        return Err(errs.swap_remove(root));
    }
    results.into_iter().collect()
}

fn sequential(
    model: &Dit<f32>,
    cond: &Conditioning,
    frames: usize,
    cfg: &EnsembleConfig,
    schedule: &Schedule,
    captures: &[(usize, usize)],
) -> Result<Vec<SampleTrace>> {
    let mut runs = cfg
        .seeds
        .iter()
        .map(|&seed| EulerRun::new(seed, frames, schedule, cond, &[]))
        .collect::<Result<Vec<_>>>()?;
    let mut hooks = cfg.seeds.iter().map(|_| capture_registry(captures)).collect::<Result<Vec<_>>>()?;
    let (lo, hi) = cfg.layer_window;
    let b = Eager;
    for step in 0..schedule.n_steps() {
        let inputs = runs.iter_mut().map(|r| r.next_input()).collect::<Result<Vec<_>>>()?;
        let s = schedule.s(step) as f32;
        if !cfg.step_window.contains(&step) {
            for ((run, x), h) in runs.iter_mut().zip(&inputs).zip(&mut hooks) {
                let v = model.forward(x, s, &cond.task, Some(h), step)?;
                run.advance(v)?;
            }
            continue;
        }
        let batch = cond.batch();
        let svec = vec![s; batch];
        let mut states = Vec::with_capacity(runs.len());
        let mut ctxs = Vec::with_capacity(runs.len());
        for x in &inputs {
            let (h, ctx) = model.embed(&b, x, &svec, &cond.task)?;
            states.push(h);
            ctxs.push(ctx);
        }
        for layer in 0..model.config.layers {
            for (h, ctx) in states.iter_mut().zip(&ctxs) {
                *h = model.block(&b, layer, h, ctx)?;
            }
            if (lo..=hi).contains(&layer) {
                let shape = states[0].shape().to_vec();
                let n = ctxs[0].tokens();
                let shaped = states
                    .iter()
                    .map(|h| Ok(h.clone().reshape([batch, n, shape[1]])?))
                    .collect::<Result<Vec<Tensor<f32>>>>()?;
                let mean = mean_in_order(&shaped).map_err(Error::Shape)?.reshape(shape)?;
                for h in states.iter_mut() {
                    *h = mean.clone();
                }
            }
            for ((h, ctx), reg) in states.iter_mut().zip(&ctxs).zip(&mut hooks) {
                reg.after_block(step, layer, h, batch, ctx.grid)?;
            }
        }
        for (((run, h), ctx), x) in runs.iter_mut().zip(&states).zip(&ctxs).zip(&inputs) {
            let out = model.head(&b, h)?;
            if !out.is_finite() {
                return Err(Error::NonFinite { what: "velocity", step });
            }
            let v_c = model.to_video(&out, batch, ctx.grid)?;
            run.advance(model.guide(x, s, &cond.task, step, v_c)?)?;
        }
    }
    runs.into_iter()
        .zip(hooks)
        .map(|(run, mut h)| run.finish(h.drain()))
        .collect()
}

//! Acceptance run over the default toy system.
//!
//! Trains the default model once (cached under the cargo target tmpdir by
//! training-config hash; set `COST_ACCEPTANCE_RETRAIN=1` to force a fresh
//! run), then checks every acceptance criterion and prints one PASS/FAIL
//! line per criterion. Exits non-zero when any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use cost_cli::checkpoint;
use cost_cli::config::{ExperimentConfig, Window};
use cost_cli::experiments::middle_half;
use cost_cli::image::{heatmap, Scale};
use cost_cli::tensorfile::{self, AnyTensor};
use cost_cli::{run, CliError, Ctx, Experiment, Report};
use cost_core::flow::{estimate_x0, euler_sample, flow_gradients, flow_loss, interpolate, velocity_target};
use cost_core::model::{Dit, HiddenState, HookRegistry, Injection, ModelConfig};
use cost_core::probe::{ensemble_sample, layer_swap_sweep, linear_cka, EnsembleConfig, EnsembleMode, SwapRegion};
use cost_core::tasks::{conditioning, maze_instance, unstack, MazeParams, TaskInstance, CHANCE_BOUND};
use cost_tensor::{grad_check, primitive_cases, Eager, Rng, Tensor, DEFAULT_STEP};
use serde_json::Value;

/// Wall-clock allowance for training, with headroom under the 30-minute cap.
const TRAIN_BUDGET_SECS: f64 = 1740.0;
const TRAIN_CAP_SECS: f64 = 1800.0;
const TARGET_SCORE: f64 = 0.80;
/// Lower bound on the CKA diagonal, frozen from the reference training run
/// (minimum 0.0057, at the earliest injection steps).
const CKA_DIAGONAL_FLOOR: f64 = 0.005;

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Lab {
    root: PathBuf,
    cfg: ExperimentConfig,
    checkpoint: PathBuf,
    train_report: Report,
    schema: jsonschema::JSONSchema,
    reports: Vec<PathBuf>,
}

fn train_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.train.time_budget_secs = Some(TRAIN_BUDGET_SECS);
    cfg.train.eval_after = false;
    cfg
}

fn schema() -> jsonschema::JSONSchema {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/schemas/report.schema.json"))
        .expect("report schema");
    let schema: Value = serde_json::from_str(&text).expect("schema is JSON");
    jsonschema::JSONSchema::compile(&schema).expect("schema compiles")
}

impl Lab {
    /// Trains the default model, or reuses a cached run of the same config.
    fn prepare() -> std::result::Result<Self, String> {
        let mut cfg = train_config();
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        cfg.output_dir = root.join("train");
        let key = cfg.hash();
        let dir = root.join(format!("train-{}", &key[..16]));
        let checkpoint = dir.join("checkpoint.cost");
        let report_path = dir.join("report.json");
        let retrain = std::env::var_os("COST_ACCEPTANCE_RETRAIN").is_some_and(|v| v != "0");
        let cached = !retrain && checkpoint.exists() && report_path.exists();
        if cached {
            eprintln!("acceptance: reusing trained model in {}", dir.display());
        } else {
            eprintln!("acceptance: training the default model (budget {TRAIN_BUDGET_SECS} s)");
            let _ = std::fs::remove_dir_all(&dir);
            let mut ctx = Ctx::new(cfg.clone(), Some(dir.clone()), None).map_err(e2s)?;
            ctx.verbose = true;
            run(Experiment::Train, &ctx).map_err(e2s)?;
        }
        let train_report = Report::read(&report_path).map_err(e2s)?;
        Ok(Self { root, cfg, checkpoint, train_report, schema: schema(), reports: vec![report_path] })
    }

    fn config(&self) -> ExperimentConfig {
        self.cfg.clone()
    }

    fn model(&self) -> std::result::Result<Dit<f32>, String> {
        Ok(checkpoint::load(&self.checkpoint).map_err(e2s)?.0)
    }

    /// Runs one experiment into its own directory and schema-checks the report.
    fn run(&mut self, which: Experiment, cfg: ExperimentConfig, trained: bool) -> std::result::Result<Report, String> {
        let dir = self.root.join(format!("{}{}", which.name(), if trained { "" } else { "-untrained" }));
        let _ = std::fs::remove_dir_all(&dir);
        let mut ctx = Ctx::new(cfg, Some(dir.clone()), trained.then(|| self.checkpoint.clone())).map_err(e2s)?;
        ctx.verbose = true;
        let report = run(which, &ctx).map_err(e2s)?;
        let path = dir.join("report.json");
        self.validate(&path)?;
        self.reports.push(path);
        Ok(report)
    }

    fn validate(&self, path: &Path) -> std::result::Result<(), String> {
        let text = std::fs::read_to_string(path).map_err(e2s)?;
        let doc: Value = serde_json::from_str(&text).map_err(e2s)?;
        if let Err(errors) = self.schema.validate(&doc) {
            let msgs: Vec<String> = errors.map(|e| e.to_string()).collect();
            return Err(format!("{} violates the report schema: {}", path.display(), msgs.join("; ")));
        }
        Ok(())
    }
}

fn num(v: &Value, ptr: &str) -> std::result::Result<f64, String> {
    v.pointer(ptr).and_then(Value::as_f64).ok_or_else(|| format!("payload has no number at {ptr}"))
}

fn flag(v: &Value, ptr: &str) -> std::result::Result<bool, String> {
    v.pointer(ptr).and_then(Value::as_bool).ok_or_else(|| format!("payload has no flag at {ptr}"))
}

fn mean_of(r: &Report) -> std::result::Result<f64, String> {
    r.aggregate.map(|a| a.mean).ok_or_else(|| format!("{} report has no aggregate", r.experiment))
}

// ---------------------------------------------------------------- criteria

fn c1_identity() -> Check {
    let t = Instant::now();
    let mut rng = Rng::new(2024);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let x0: Tensor<f32> = rng.gaussian([8, 5, 5, 4]).map_err(e2s)?;
        let x1: Tensor<f32> = rng.gaussian([8, 5, 5, 4]).map_err(e2s)?;
        let s = rng.uniform();
        let xs = interpolate(&x0, &x1, s).map_err(e2s)?;
        let v = velocity_target(&x0, &x1).map_err(e2s)?;
        worst = worst.max(estimate_x0(&xs, &v, s).map_err(e2s)?.max_abs_diff(&x0).map_err(e2s)?);
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(worst <= 1e-6, || format!("max abs error {worst:.3e} > 1e-6"))?;
    ensure(secs < 5.0, || format!("took {secs:.1} s"))?;
    Ok(format!("1000 draws, max abs error {worst:.2e}, {secs:.2} s"))
}

fn mini_model() -> ModelConfig {
    ModelConfig { layers: 2, dim: 12, heads: 2, video: [3, 2, 2], time_freq_dim: 8, ..Default::default() }
}

fn c2_gradients() -> Check {
    let t = Instant::now();
    let mut worst_prim = 0.0f64;
    let mut cases = 0;
    for seed in 0..10 {
        for case in primitive_cases(seed) {
            let err = grad_check(&*case.f, &case.inputs, DEFAULT_STEP).map_err(|e| format!("{}: {e}", case.name))?;
            ensure(err <= 1e-4, || format!("primitive {} (seed {seed}): rel err {err:.3e}", case.name))?;
            worst_prim = worst_prim.max(err);
            cases += 1;
        }
    }
    // Every parameter entry of a two-block model, through the full objective.
    let mut rng = Rng::new(77);
    let model: Dit<f64> = Dit::new(mini_model(), &mut rng).map_err(e2s)?;
    let x0: Tensor<f64> = rng.gaussian([2, 3, 2, 2, 4]).map_err(e2s)?;
    let x1: Tensor<f64> = rng.gaussian([2, 3, 2, 2, 4]).map_err(e2s)?;
    let (s, task) = ([0.35, 0.8], [0usize, 1]);
    let loss = |m: &Dit<f64>| -> std::result::Result<f64, String> {
        flow_loss(m, &Eager, &x0, &x1, &s, &task, 1).map_err(e2s)?.item().map_err(e2s)
    };
    let (_, grads) = flow_gradients(&model, &x0, &x1, &s, &task, 1).map_err(e2s)?;
    let h = DEFAULT_STEP;
    let mut worst_model = 0.0f64;
    let mut entries = 0;
    for (p, g) in grads.iter().enumerate() {
        for i in 0..g.numel() {
            let mut plus = model.clone();
            plus.params_mut()[p].data_mut()[i] += h;
            let mut minus = model.clone();
            minus.params_mut()[p].data_mut()[i] -= h;
            let numeric = (loss(&plus)? - loss(&minus)?) / (2.0 * h);
            let a = g.data()[i];
            worst_model = worst_model.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
            entries += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(worst_model <= 1e-4, || format!("two-block model: rel err {worst_model:.3e}"))?;
    ensure(secs < 120.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "{cases} primitive cases (worst {worst_prim:.2e}), {entries} model entries (worst {worst_model:.2e}), {secs:.1} s"
    ))
}

/// HSIC-based CKA with explicit Gram matrices and scalar loops.
fn cka_oracle(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let n = x.len();
    let gram = |m: &[Vec<f64>]| -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..n).map(|j| m[i].iter().zip(&m[j]).map(|(a, b)| a * b).sum()).collect()).collect()
    };
    let centre = |k: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        let row: Vec<f64> = k.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
        let all = row.iter().sum::<f64>() / n as f64;
        (0..n).map(|i| (0..n).map(|j| k[i][j] - row[i] - row[j] + all).collect()).collect()
    };
    let hsic = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
        (0..n).map(|i| (0..n).map(|j| a[i][j] * b[i][j]).sum::<f64>()).sum()
    };
    let (k, l) = (centre(gram(x)), centre(gram(y)));
    hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
}

fn to_rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect()
}

fn matmul(a: &Tensor<f64>, b: &[Vec<f64>]) -> Tensor<f64> {
    let (n, d) = (a.shape()[0], a.shape()[1]);
    let m = b[0].len();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for k in 0..d {
            for j in 0..m {
                out[i * m + j] += a.data()[i * d + k] * b[k][j];
            }
        }
    }
    Tensor::new([n, m], out).expect("shape")
}

/// Orthogonal `d × d` matrix by Gram–Schmidt on Gaussian columns.
fn orthogonal(d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v = vec![0.0f64; d];
        rng.fill_normal(&mut v);
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        cols.push(v.into_iter().map(|a| a / norm).collect());
    }
    (0..d).map(|i| (0..d).map(|j| cols[j][i]).collect()).collect()
}

fn c6_cka() -> Check {
    let t = Instant::now();
    let mut rng = Rng::new(606);
    let mut worst_self = 0.0f64;
    let mut worst_inv = 0.0f64;
    let mut worst_oracle = 0.0f64;
    for (n, dx, dy) in [(6, 3, 4), (9, 5, 2), (12, 4, 4), (5, 2, 3)] {
        let x: Tensor<f64> = rng.gaussian([n, dx]).map_err(e2s)?;
        let y: Tensor<f64> = rng.gaussian([n, dy]).map_err(e2s)?;
        worst_self = worst_self.max((linear_cka(&x, &x).map_err(e2s)? - 1.0).abs());
        let base = linear_cka(&x, &y).map_err(e2s)?;
        let rotated = matmul(&x, &orthogonal(dx, &mut rng));
        let scaled = x.map(|v| 3.7 * v);
        for other in [&rotated, &scaled] {
            worst_inv = worst_inv.max((linear_cka(other, &y).map_err(e2s)? - base).abs());
        }
        worst_oracle = worst_oracle.max((base - cka_oracle(&to_rows(&x), &to_rows(&y))).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(worst_self <= 1e-9, || format!("self-similarity off by {worst_self:.3e}"))?;
    ensure(worst_inv <= 1e-9, || format!("invariance broken by {worst_inv:.3e}"))?;
    ensure(worst_oracle <= 1e-12, || format!("oracle disagreement {worst_oracle:.3e}"))?;
    ensure(secs < 5.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "self {worst_self:.1e}, invariance {worst_inv:.1e}, oracle {worst_oracle:.1e}, {secs:.3} s"
    ))
}

fn c3_capability(lab: &mut Lab) -> Check {
    let train_secs = num(&lab.train_report.payload, "/train_secs")?;
    let steps = num(&lab.train_report.payload, "/steps_completed")?;
    let trained = lab.run(Experiment::Eval, lab.config(), true)?;
    let untrained = lab.run(Experiment::Eval, lab.config(), false)?;
    let (ts, us) = (mean_of(&trained)?, mean_of(&untrained)?);
    let chance = num(&untrained.payload, "/chance/mean")?;
    let detail = format!(
        "trained {ts:.4} (n={}, {steps} steps in {train_secs:.0} s), untrained {us:.4}, chance bound {CHANCE_BOUND} (measured {chance:.4})",
        trained.instances.len()
    );
    ensure(trained.instances.len() >= 200, || format!("only {} instances", trained.instances.len()))?;
    ensure(train_secs <= TRAIN_CAP_SECS, || format!("training took {train_secs:.0} s; {detail}"))?;
    ensure(us <= CHANCE_BOUND + 0.05, || format!("untrained baseline too high; {detail}"))?;
    ensure(ts >= TARGET_SCORE, || format!("trained score below {TARGET_SCORE}; {detail}"))?;
    Ok(detail)
}

fn c4_step_vs_frame(lab: &mut Lab) -> Check {
    let mut cfg = lab.config();
    cfg.perturb.count = 100;
    cfg.perturb.steps = Some(middle_half(cfg.schedule.n_steps()).collect());
    let r = lab.run(Experiment::Perturb, cfg, true)?;
    let p = &r.payload;
    let step = num(p, "/comparison/step_drop/mean")?;
    let frame = num(p, "/comparison/frame_drop/mean")?;
    let pval = num(p, "/comparison/test_step_exceeds_twice_frame/p_value")?;
    let detail = format!(
        "n={}, step drop {step:.4}, frame drop {frame:.4}, ratio {}, p(step > 2·frame) = {pval:.2e}",
        r.instances.len(),
        if frame > 0.0 { format!("{:.2}", step / frame) } else { "inf".into() }
    );
    ensure(r.instances.len() >= 100, || format!("only {} instances", r.instances.len()))?;
    ensure(step > 0.0 && step >= 2.0 * frame, || format!("step drop under twice frame drop; {detail}"))?;
    ensure(pval < 0.01, || format!("not significant; {detail}"))?;
    Ok(detail)
}

fn c5_cka_matrix(lab: &mut Lab) -> Check {
    let cfg = lab.config();
    let n = cfg.schedule.n_steps();
    let r = lab.run(Experiment::Cka, cfg.clone(), true)?;
    let p = &r.payload;
    ensure(flag(p, "/zero_block_exact")?, || "entries before the injection step are not exactly zero".into())?;
    ensure(flag(p, "/entries_in_unit_interval")?, || "entries outside [0, 1]".into())?;
    let diag: Vec<f64> = p["diagonal"].as_array().ok_or("no diagonal")?.iter().filter_map(Value::as_f64).collect();
    ensure(diag.len() == n, || format!("{} diagonal entries for {n} steps", diag.len()))?;
    let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
    ensure(min >= CKA_DIAGONAL_FLOOR, || format!("diagonal minimum {min:.4} below floor {CKA_DIAGONAL_FLOOR}"))?;
    let values: Vec<f64> = p["matrix"]
        .as_array()
        .ok_or("no matrix")?
        .iter()
        .flat_map(|row| row.as_array().into_iter().flatten().filter_map(Value::as_f64))
        .collect();
    let render = || heatmap(&values, n, n, Scale::Fixed { lo: 0.0, hi: 1.0 }, cfg.cka.cell_px).map(|m| m.to_ppm());
    let (a, b) = (render().map_err(e2s)?, render().map_err(e2s)?);
    let written = std::fs::read(lab.root.join("cka").join("cka.ppm")).map_err(e2s)?;
    ensure(a == b && a == written, || "heatmap rendering is not deterministic".into())?;
    ensure(r.wall_clock_secs < 600.0, || format!("sweep took {:.0} s", r.wall_clock_secs))?;
    Ok(format!(
        "{n}x{n} over {} instances: zero block exact, entries in [0,1], diagonal min {min:.4} ≥ {CKA_DIAGONAL_FLOOR}, heatmap stable, {:.0} s",
        r.instances.len(),
        r.wall_clock_secs
    ))
}

fn pairs(split: u64, count: usize) -> std::result::Result<Vec<TaskInstance>, String> {
    (0..count as u64).map(|i| maze_instance(split, i, &MazeParams::default()).map_err(e2s)).collect()
}

fn c7_ensemble_mechanics(lab: &Lab) -> Check {
    let t = Instant::now();
    let model = lab.model()?;
    let cfg = lab.config();
    let inst = pairs(cfg.task.split_seed, 2)?;
    let cond = conditioning(&inst.iter().collect::<Vec<_>>()).map_err(e2s)?;
    let frames = cfg.model.video[0];
    let sched = &cfg.schedule;
    let seed = 31;
    let plain = euler_sample(&model, &cond, frames, seed, sched, None, &[]).map_err(e2s)?;
    let (lo, hi) = model.config.mid_window();
    let ecfg = |seeds: Vec<u64>| EnsembleConfig { seeds, layer_window: (lo, hi), step_window: vec![0], timeout_secs: 60 };
    for seeds in [vec![seed], vec![seed; 3]] {
        let k = seeds.len();
        let runs = ensemble_sample(&model, &cond, frames, &ecfg(seeds), sched, &[], EnsembleMode::Concurrent)
            .map_err(e2s)?;
        for run in &runs {
            ensure(run.final_video() == plain.final_video() && run.x0_hat == plain.x0_hat, || {
                format!("K={k} ensemble differs from plain sampling")
            })?;
        }
    }
    let layers = model.config.layers;
    let mut slots: Vec<(usize, usize)> = (0..layers).map(|l| (0, l)).collect();
    slots.push((1, lo));
    let runs = ensemble_sample(&model, &cond, frames, &ecfg(vec![seed, seed + 1, seed + 2]), sched, &slots, EnsembleMode::Concurrent)
        .map_err(e2s)?;
    let state = |run: &cost_core::flow::SampleTrace, step: usize, layer: usize| {
        run.hidden.iter().find(|h| h.step == step && h.layer == layer).map(|h| h.tokens.clone())
    };
    let mut inside = 0.0f64;
    for l in lo..=hi {
        let a = state(&runs[0], 0, l).ok_or("missing capture")?;
        for run in &runs[1..] {
            inside = inside.max(a.max_abs_diff(&state(run, 0, l).ok_or("missing capture")?).map_err(e2s)?);
        }
    }
    ensure(inside <= 1e-6, || format!("members disagree inside the window by {inside:.3e}"))?;
    let mut outside_slots = vec![(1, lo)];
    if lo > 0 {
        outside_slots.push((0, lo - 1));
    }
    for (s, l) in outside_slots {
        let a = state(&runs[0], s, l).ok_or("missing capture")?;
        for run in &runs[1..] {
            ensure(a != state(run, s, l).ok_or("missing capture")?, || format!("members agree outside the window at step {s}, layer {l}"))?;
        }
    }
    ensure(runs[0].final_video() != runs[1].final_video(), || "distinct seeds produced identical videos".into())?;
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "K=1 and identical seeds bit-identical to plain sampling; window {lo}..={hi} agreement {inside:.1e}; differs outside; {secs:.1} s"
    ))
}

fn c8_ensemble(lab: &mut Lab) -> Check {
    let mut cfg = lab.config();
    cfg.task.count = 200;
    cfg.ensemble.window = Window::Mid;
    cfg.ensemble.ablation_count = Some(50);
    let r = lab.run(Experiment::Ensemble, cfg.clone(), true)?;
    let p = &r.payload;
    let (single, ens) = (num(p, "/single/mean")?, num(p, "/ensemble/mean")?);
    let pni = num(p, "/noninferiority/p_value")?;
    let psup = num(p, "/superiority/p_value")?;
    let ab = lab.run(Experiment::AblateWindow, cfg, true)?;
    let ordered = flag(&ab.payload, "/mid_at_least_early")?;
    let deviation = ab.payload.get("deviation").and_then(Value::as_str).map(str::to_string);
    let window_note = match (&deviation, ordered) {
        (_, true) => "window ablation: mid ≥ early".to_string(),
        (Some(d), false) => format!("window ablation deviation flagged: {d}"),
        (None, false) => return Err("mid < early but the report does not flag it".into()),
    };
    let detail = format!(
        "n={}, single {single:.4}, ensemble {ens:.4}, non-inferiority (δ={}) p = {pni:.2e}, superiority p = {psup:.3}; {window_note}",
        r.instances.len(),
        cfg_margin(p)
    );
    ensure(r.instances.len() >= 200, || format!("only {} instances", r.instances.len()))?;
    ensure(pni < 0.05, || format!("non-inferiority not shown; {detail}"))?;
    Ok(detail)
}

fn cfg_margin(p: &Value) -> f64 {
    p.get("margin").and_then(Value::as_f64).unwrap_or(f64::NAN)
}

fn c9_frames(lab: &mut Lab) -> Check {
    let mut cfg = lab.config();
    cfg.task.count = 100;
    let r = lab.run(Experiment::AblateFrames, cfg, true)?;
    let p = &r.payload;
    let rows = p["per_frame_count"].as_array().ok_or("no per-frame rows")?;
    let mut by_f = Vec::new();
    for row in rows {
        by_f.push((num(row, "/frames")? as usize, num(row, "/score/mean")?));
    }
    let get = |f: usize| by_f.iter().find(|r| r.0 == f).map(|r| r.1).ok_or(format!("no row for F={f}"));
    let (one, eight) = (get(1)?, get(8)?);
    let monotone = flag(p, "/monotone")?;
    let curve: Vec<String> = by_f.iter().map(|(f, s)| format!("F={f}: {s:.3}")).collect();
    let detail = format!("n={} (≥4 moves), {}; monotone: {monotone}", num(p, "/n")?, curve.join(", "));
    ensure(eight >= one, || format!("F=8 below F=1; {detail}"))?;
    Ok(detail)
}

fn c10_swap(lab: &mut Lab) -> Check {
    let model = lab.model()?;
    let cfg = lab.config();
    let frames = cfg.model.video[0];
    let sched = &cfg.schedule;
    let rec = pairs(cfg.task.split_seed, 2)?;
    let don = pairs(cfg.swap.donor_split_seed, 2)?;
    let rc = conditioning(&rec.iter().collect::<Vec<_>>()).map_err(e2s)?;
    let dc = conditioning(&don.iter().collect::<Vec<_>>()).map_err(e2s)?;
    let seed = 5;
    let layers = model.config.layers;
    // No-op: swapping a run with itself reproduces it bit for bit.
    let plain = euler_sample(&model, &rc, frames, seed, sched, None, &[]).map_err(e2s)?;
    let plain_videos = unstack(plain.final_video()).map_err(e2s)?;
    for region in [SwapRegion::All, SwapRegion::Generated] {
        for (layer, videos) in
            layer_swap_sweep(&model, &rc, &rc, frames, seed, sched, 0, &[0, layers / 2, layers - 1], region).map_err(e2s)?
        {
            ensure(videos == plain_videos, || format!("self-swap at layer {layer} ({region:?}) changed the output"))?;
        }
    }
    // Upstream isolation: layers below the swap see exactly the clean states.
    let k = layers / 2;
    let all: Vec<usize> = (0..layers).collect();
    let mut donor_hooks = HookRegistry::new();
    donor_hooks.register_capture(&[0], &[k]).map_err(e2s)?;
    let donor = euler_sample(&model, &dc, frames, seed, sched, Some(&mut donor_hooks), &[]).map_err(e2s)?;
    let mut clean = HookRegistry::new();
    clean.register_capture(&[0], &all).map_err(e2s)?;
    let clean = euler_sample(&model, &rc, frames, seed, sched, Some(&mut clean), &[]).map_err(e2s)?.hidden;
    let mut hit = HookRegistry::new();
    hit.register_capture(&[0], &all).map_err(e2s)?;
    hit.inject(0, k, Injection::Replace(at_layer(&donor.hidden, k)?.clone())).map_err(e2s)?;
    let hit = euler_sample(&model, &rc, frames, seed, sched, Some(&mut hit), &[]).map_err(e2s)?.hidden;
    for l in 0..k {
        ensure(at_layer(&clean, l)? == at_layer(&hit, l)?, || format!("layer {l} changed by a swap at layer {k}"))?;
    }
    ensure(at_layer(&clean, k + 1)? != at_layer(&hit, k + 1)?, || "swap had no downstream effect".into())?;
    // Full layer sweep on the configured pairs.
    let r = lab.run(Experiment::Swap, cfg, true)?;
    let curve = r.payload["curve"].as_array().ok_or("no flip curve")?;
    let rates: Vec<String> = curve.iter().filter_map(|c| c.pointer("/flip_rate/mean").and_then(Value::as_f64)).map(|v| format!("{v:.2}")).collect();
    ensure(curve.len() == layers && rates.len() == layers, || format!("curve has {} of {layers} layers", rates.len()))?;
    let n = num(&r.payload, "/n")?;
    ensure(n >= 50.0, || format!("only {n} pairs"))?;
    Ok(format!("self-swap and upstream isolation bit-exact; flip rate by layer over {n} pairs: [{}]", rates.join(", ")))
}

/// Step-0 tokens captured at `layer`.
fn at_layer(hidden: &[HiddenState], layer: usize) -> std::result::Result<&Tensor<f32>, String> {
    hidden
        .iter()
        .find(|h| h.step == 0 && h.layer == layer)
        .map(|h| &h.tokens)
        .ok_or_else(|| format!("no capture at layer {layer}"))
}

fn c11_persistence(lab: &Lab) -> Check {
    let bytes = std::fs::read(&lab.checkpoint).map_err(e2s)?;
    let (model, manifest) = checkpoint::decode(&bytes).map_err(e2s)?;
    let again = checkpoint::encode(&model, manifest.train_steps, &manifest.config_hash).map_err(e2s)?;
    ensure(again == bytes, || "checkpoint re-encoding is not byte-identical".into())?;
    let (back, _) = checkpoint::decode(&again).map_err(e2s)?;
    ensure(back.named_params() == model.named_params(), || "checkpoint round trip changed parameters".into())?;
    // Tensor files: a sampled video and an f64 tensor.
    let dir = lab.root.join("persistence");
    std::fs::create_dir_all(&dir).map_err(e2s)?;
    let video: Tensor<f32> = Rng::new(8).gaussian([8, 5, 5, 4]).map_err(e2s)?;
    let wide: Tensor<f64> = Rng::new(9).gaussian([3, 7]).map_err(e2s)?;
    tensorfile::write(&dir.join("video.cost"), &video).map_err(e2s)?;
    tensorfile::write(&dir.join("wide.cost"), &wide).map_err(e2s)?;
    ensure(tensorfile::read(&dir.join("video.cost")).map_err(e2s)? == AnyTensor::F32(video.clone()), || "f32 tensor round trip".into())?;
    ensure(tensorfile::read(&dir.join("wide.cost")).map_err(e2s)? == AnyTensor::F64(wide), || "f64 tensor round trip".into())?;
    // Corruption: every flipped payload byte is caught by a checksum.
    let tf = tensorfile::encode(&video).map_err(e2s)?;
    let header = tf.len() - 4 - video.numel() * 4;
    let mut caught = 0;
    for at in (header..tf.len() - 4).step_by(37) {
        let mut bad = tf.clone();
        bad[at] ^= 0x10;
        ensure(matches!(tensorfile::decode(&bad), Err(CliError::Crc { .. })), || format!("tensor byte {at} not caught"))?;
        caught += 1;
    }
    let manifest_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let base = 20 + manifest_len;
    let mut positions: Vec<usize> = (16..16 + manifest_len).step_by(97).collect();
    for p in &manifest.params {
        let start = base + p.offset as usize;
        let payload = start + p.length as usize - 4 - p.shape.iter().product::<usize>() * 4;
        positions.push(payload);
        positions.push(start + p.length as usize - 5);
    }
    for at in positions {
        let mut bad = bytes.clone();
        bad[at] ^= 0x01;
        ensure(matches!(checkpoint::decode(&bad), Err(CliError::Crc { .. })), || format!("checkpoint byte {at} not caught"))?;
        caught += 1;
    }
    // Reports written during this run re-aggregate exactly.
    for path in &lab.reports {
        let r = Report::read(path).map_err(e2s)?;
        r.verify_aggregate().map_err(|e| format!("{}: {e}", path.display()))?;
        if let Some(agg) = r.aggregate {
            let mean = r.instances.iter().map(|i| i.score).sum::<f64>() / r.instances.len() as f64;
            ensure((agg.mean - mean).abs() <= 1e-12, || format!("{} aggregate drifted", path.display()))?;
        }
        lab.validate(path)?;
    }
    Ok(format!(
        "checkpoint ({} params) and tensor files bit-exact; {caught} corrupted bytes caught by CRC; {} reports re-aggregate exactly",
        manifest.params.len(),
        lab.reports.len()
    ))
}

// ---------------------------------------------------------------- driver

struct Line {
    id: usize,
    name: &'static str,
    outcome: Check,
}

fn guarded(f: impl FnOnce() -> Check) -> Check {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    })
}

fn record(lines: &mut Vec<Line>, id: usize, name: &'static str, f: impl FnOnce() -> Check) {
    let t = Instant::now();
    eprintln!("acceptance: criterion {id} ({name}) ...");
    let outcome = guarded(f);
    eprintln!("acceptance: criterion {id} finished in {:.1} s", t.elapsed().as_secs_f64());
    lines.push(Line { id, name, outcome });
}

fn main() {
    let started = Instant::now();
    let mut lines = Vec::new();
    record(&mut lines, 1, "algebraic core", c1_identity);
    record(&mut lines, 2, "differentiation", c2_gradients);
    record(&mut lines, 6, "CKA unit suite", c6_cka);
    let prepared = catch_unwind(Lab::prepare).unwrap_or_else(|_| Err("training panicked".into()));
    match prepared {
        Ok(mut lab) => {
            record(&mut lines, 3, "toy capability", || c3_capability(&mut lab));
            record(&mut lines, 4, "step vs frame noise", || c4_step_vs_frame(&mut lab));
            record(&mut lines, 5, "CKA matrix structure", || c5_cka_matrix(&mut lab));
            record(&mut lines, 7, "ensemble mechanics", || c7_ensemble_mechanics(&lab));
            record(&mut lines, 8, "ensemble vs single seed", || c8_ensemble(&mut lab));
            record(&mut lines, 9, "frame-count ablation", || c9_frames(&mut lab));
            record(&mut lines, 10, "swap mechanics", || c10_swap(&mut lab));
            record(&mut lines, 11, "persistence", || c11_persistence(&lab));
        }
        Err(e) => {
            for (id, name) in [
                (3, "toy capability"),
                (4, "step vs frame noise"),
                (5, "CKA matrix structure"),
                (7, "ensemble mechanics"),
                (8, "ensemble vs single seed"),
                (9, "frame-count ablation"),
                (10, "swap mechanics"),
                (11, "persistence"),
            ] {
                lines.push(Line { id, name, outcome: Err(format!("training failed: {e}")) });
            }
        }
    }
    lines.sort_by_key(|l| l.id);
    println!();
    println!("acceptance summary ({:.0} s)", started.elapsed().as_secs_f64());
    for l in &lines {
        match &l.outcome {
            Ok(d) => println!("PASS criterion {:>2} {}: {d}", l.id, l.name),
            Err(e) => println!("FAIL criterion {:>2} {}: {e}", l.id, l.name),
        }
    }
    let failed = lines.iter().filter(|l| l.outcome.is_err()).count();
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

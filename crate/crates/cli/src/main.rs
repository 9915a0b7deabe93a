use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cost_cli::{run, CliError, Ctx, Experiment, ExperimentConfig};

/// Toy video diffusion lab: train, sample, and probe a flow-matching
/// transformer on grid-reasoning tasks.
#[derive(Parser)]
#[command(name = "cost", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Model checkpoint written by `train`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Progress lines on stderr.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Verb {
    /// Train from scratch and save `checkpoint.cost`.
    Train(Common),
    /// Score samples on held-out tasks (untrained model without --checkpoint).
    Eval(Common),
    /// Like eval, also writing videos and x̂₀ trajectories.
    Sample(Common),
    /// Step-noise and frame-noise sensitivity sweeps.
    Perturb(Common),
    /// Dissimilarity matrix between clean and step-noised runs.
    Cka(Common),
    /// Per-layer activation energy heatmaps.
    Energy(Common),
    /// Layer-wise latent swap flip rates.
    Swap(Common),
    /// Multi-seed hidden-state ensemble against single-seed sampling.
    Ensemble(Common),
    /// Early, full and mid ensemble windows.
    AblateWindow(Common),
    /// Scores across frame counts on long-path mazes.
    AblateFrames(Common),
}

impl Verb {
    fn split(self) -> (Experiment, Common) {
        match self {
            Verb::Train(c) => (Experiment::Train, c),
            Verb::Eval(c) => (Experiment::Eval, c),
            Verb::Sample(c) => (Experiment::Sample, c),
            Verb::Perturb(c) => (Experiment::Perturb, c),
            Verb::Cka(c) => (Experiment::Cka, c),
            Verb::Energy(c) => (Experiment::Energy, c),
            Verb::Swap(c) => (Experiment::Swap, c),
            Verb::Ensemble(c) => (Experiment::Ensemble, c),
            Verb::AblateWindow(c) => (Experiment::AblateWindow, c),
            Verb::AblateFrames(c) => (Experiment::AblateFrames, c),
        }
    }
}

fn execute(which: Experiment, c: Common) -> Result<PathBuf, CliError> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    let mut ctx = Ctx::new(cfg, c.out, c.checkpoint)?;
    ctx.verbose = c.verbose;
    run(which, &ctx)?;
    Ok(ctx.path("report.json"))
}

fn main() -> ExitCode {
    let (which, common) = Cli::parse().verb.split();
    match execute(which, common) {
        Ok(report) => {
            println!("{}", report.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let body = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{body}");
            ExitCode::from(2)
        }
    }
}

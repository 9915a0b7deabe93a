//! Deterministic Euler integration from noise to data.

use cost_tensor::{Rng, Tensor};

use super::path::estimate_x0;
use super::schedule::Schedule;
use crate::error::{Error, Result};
use crate::model::{Dit, HiddenState, HookRegistry};

/// Problem statement for a batch: the clean leading frames that are clamped
/// into every model input, and one task label per instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    /// `(B, k, H, W, C)` with `k ≥ 1` conditioning frames.
    pub frames: Tensor<f32>,
    pub task: Vec<usize>,
}

impl Conditioning {
    pub fn new(frames: Tensor<f32>, task: Vec<usize>) -> Result<Self> {
        if frames.rank() != 5 || frames.shape()[0] != task.len() {
            return Err(Error::Shape(format!(
                "conditioning frames {:?} for {} task labels",
                frames.shape(),
                task.len()
            )));
        }
        Ok(Self { frames, task })
    }

    pub fn batch(&self) -> usize {
        self.task.len()
    }

    pub fn n_frames(&self) -> usize {
        self.frames.shape()[1]
    }

    /// Overwrites the leading frames of `x` `(B, F, H, W, C)` with the condition.
    pub fn clamp(&self, x: &mut Tensor<f32>) -> Result<()> {
        let (xs, cs) = (x.shape(), self.frames.shape());
        if xs.len() != 5 || xs[0] != cs[0] || xs[2..] != cs[2..] || xs[1] < cs[1] {
            return Err(Error::Shape(format!("cannot clamp {cs:?} into {xs:?}")));
        }
        let frame = cs[2] * cs[3] * cs[4];
        let (fx, fc) = (xs[1] * frame, cs[1] * frame);
        let src = self.frames.data();
        let dst = x.data_mut();
        for b in 0..cs[0] {
            dst[b * fx..b * fx + fc].copy_from_slice(&src[b * fc..(b + 1) * fc]);
        }
        Ok(())
    }
}

/// Anything that maps `(x_s, s)` to a velocity; the model is the main one,
/// stubs make the integrator testable in closed form.
pub trait VelocityField: Sync {
    fn velocity(
        &self,
        x: &Tensor<f32>,
        s: f32,
        task: &[usize],
        hooks: Option<&mut HookRegistry>,
        step: usize,
    ) -> Result<Tensor<f32>>;
}

impl VelocityField for Dit<f32> {
    fn velocity(
        &self,
        x: &Tensor<f32>,
        s: f32,
        task: &[usize],
        hooks: Option<&mut HookRegistry>,
        step: usize,
    ) -> Result<Tensor<f32>> {
        self.forward(x, s, task, hooks, step)
    }
}

/// A modification of the latent applied just before a model evaluation.
pub trait LatentIntervention: Send + Sync {
    fn describe(&self) -> String;

    /// Rejects interventions that reference steps or frames outside the run.
    fn validate(&self, schedule: &Schedule, frames: usize) -> Result<()>;

    /// Mutates `x` ahead of the evaluation at `step`. Returning `true`
    /// suppresses the conditioning clamp for this one evaluation.
    fn before_eval(&self, step: usize, s: f64, x: &mut Tensor<f32>) -> Result<bool>;
}

/// Everything a sampling run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub seed: u64,
    pub schedule: Schedule,
    /// Model inputs for each step, then the final video (`n_steps + 1` entries).
    pub xs: Vec<Tensor<f32>>,
    /// One clean-state estimate per model evaluation.
    pub x0_hat: Vec<Tensor<f32>>,
    pub velocities: Vec<Tensor<f32>>,
    pub interventions: Vec<String>,
    pub hidden: Vec<HiddenState>,
}

impl SampleTrace {
    pub fn final_video(&self) -> &Tensor<f32> {
        self.xs.last().expect("trace holds the final state")
    }
}

/// Initial noise `(B, F, H, W, C)`; instance `b` draws from its own stream
/// so results do not depend on how instances are batched.
pub fn initial_noise(seed: u64, shape: [usize; 5]) -> Result<Tensor<f32>> {
    let per = shape[1..].iter().product::<usize>();
    let mut data = vec![0.0f32; shape[0] * per];
    for (b, chunk) in data.chunks_mut(per).enumerate() {
        Rng::derive(seed, b as u64).fill_normal(chunk);
    }
    Ok(Tensor::new(shape.to_vec(), data)?)
}

/// Sampler state advanced one model evaluation at a time, so several runs can
/// be driven in lock-step by an external loop.
pub struct EulerRun<'a> {
    schedule: &'a Schedule,
    cond: &'a Conditioning,
    interventions: &'a [&'a dyn LatentIntervention],
    step: usize,
    x: Tensor<f32>,
    trace: SampleTrace,
}

impl<'a> EulerRun<'a> {
    pub fn new(
        seed: u64,
        frames: usize,
        schedule: &'a Schedule,
        cond: &'a Conditioning,
        interventions: &'a [&'a dyn LatentIntervention],
    ) -> Result<Self> {
        let cs = cond.frames.shape();
        if frames < cond.n_frames() {
            return Err(Error::Shape(format!(
                "{frames} frames cannot hold {} conditioning frames",
                cond.n_frames()
            )));
        }
        for iv in interventions {
            iv.validate(schedule, frames)?;
        }
        let x = initial_noise(seed, [cs[0], frames, cs[2], cs[3], cs[4]])?;
        Ok(Self {
            schedule,
            cond,
            interventions,
            step: 0,
            x,
            trace: SampleTrace {
                seed,
                schedule: schedule.clone(),
                xs: Vec::new(),
                x0_hat: Vec::new(),
                velocities: Vec::new(),
                interventions: interventions.iter().map(|i| i.describe()).collect(),
                hidden: Vec::new(),
            },
        })
    }

    /// Continues from step `step` of an earlier run that shares this run's
    /// seed, schedule and conditioning and had no intervention active before
    /// `step`; the recorded prefix is reused instead of recomputed. The new
    /// interventions must only act at or after `step`.
    pub fn resume(
        prefix: &'a SampleTrace,
        step: usize,
        frames: usize,
        cond: &'a Conditioning,
        interventions: &'a [&'a dyn LatentIntervention],
    ) -> Result<Self> {
        let schedule = &prefix.schedule;
        if step >= prefix.xs.len() || step > schedule.n_steps() || prefix.x0_hat.len() < step {
            return Err(Error::Schedule(format!("cannot resume at step {step}")));
        }
        if prefix.xs[0].shape()[1] != frames {
            return Err(Error::Shape(format!("prefix has {} frames, not {frames}", prefix.xs[0].shape()[1])));
        }
        for iv in interventions {
            iv.validate(schedule, frames)?;
        }
        Ok(Self {
            schedule,
            cond,
            interventions,
            step,
            x: prefix.xs[step].clone(),
            trace: SampleTrace {
                seed: prefix.seed,
                schedule: schedule.clone(),
                xs: prefix.xs[..step].to_vec(),
                x0_hat: prefix.x0_hat[..step].to_vec(),
                velocities: prefix.velocities[..step].to_vec(),
                interventions: interventions.iter().map(|i| i.describe()).collect(),
                hidden: Vec::new(),
            },
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step == self.schedule.n_steps()
    }

    /// Noise level of the pending evaluation.
    pub fn s(&self) -> f64 {
        self.schedule.s(self.step)
    }

    pub fn task(&self) -> &[usize] {
        &self.cond.task
    }

    /// Applies interventions and the clamp, records and returns the model input.
    pub fn next_input(&mut self) -> Result<Tensor<f32>> {
        if self.is_done() {
            return Err(Error::Schedule("run already complete".into()));
        }
        let s = self.s();
        let mut skip_clamp = false;
        for iv in self.interventions {
            skip_clamp |= iv.before_eval(self.step, s, &mut self.x)?;
        }
        if !skip_clamp {
            self.cond.clamp(&mut self.x)?;
        }
        self.trace.xs.push(self.x.clone());
        Ok(self.x.clone())
    }

    /// Consumes the velocity for the pending step: records `x̂₀` and takes
    /// the Euler step `x ← x + (s_{i+1} − s_i)·v`.
    pub fn advance(&mut self, v: Tensor<f32>) -> Result<()> {
        let step = self.step;
        let x_in = self.trace.xs.last().filter(|_| self.trace.xs.len() == step + 1).ok_or_else(|| {
            Error::Schedule(format!("advance at step {step} without a pending input"))
        })?;
        let x0 = estimate_x0(x_in, &v, self.s())?;
        let dt = self.schedule.delta(step) as f32;
        let next = x_in.zip_map(&v, "euler", |x, v| x + dt * v)?;
        if !next.is_finite() {
            return Err(Error::NonFinite { what: "latent", step });
        }
        self.x = next;
        self.trace.x0_hat.push(x0);
        self.trace.velocities.push(v);
        self.step += 1;
        Ok(())
    }

    /// Clamps and records the final video.
    pub fn finish(mut self, hidden: Vec<HiddenState>) -> Result<SampleTrace> {
        if !self.is_done() {
            return Err(Error::Schedule(format!("run stopped at step {}", self.step)));
        }
        self.cond.clamp(&mut self.x)?;
        self.trace.xs.push(self.x);
        self.trace.hidden = hidden;
        Ok(self.trace)
    }
}

/// Integrates from seeded noise at `s = 1` to `s = 0`, recording the trace.
pub fn euler_sample(
    field: &dyn VelocityField,
    cond: &Conditioning,
    frames: usize,
    seed: u64,
    schedule: &Schedule,
    hooks: Option<&mut HookRegistry>,
    interventions: &[&dyn LatentIntervention],
) -> Result<SampleTrace> {
    let run = EulerRun::new(seed, frames, schedule, cond, interventions)?;
    drive(field, run, hooks)
}

/// [`euler_sample`] that reuses the first `step` steps of `prefix`
/// (see [`EulerRun::resume`]).
pub fn euler_sample_from(
    field: &dyn VelocityField,
    prefix: &SampleTrace,
    step: usize,
    cond: &Conditioning,
    interventions: &[&dyn LatentIntervention],
) -> Result<SampleTrace> {
    let frames = prefix.xs[0].shape()[1];
    let run = EulerRun::resume(prefix, step, frames, cond, interventions)?;
    drive(field, run, None)
}

fn drive(field: &dyn VelocityField, mut run: EulerRun<'_>, mut hooks: Option<&mut HookRegistry>) -> Result<SampleTrace> {
    let cond = run.cond;
    while !run.is_done() {
        let x = run.next_input()?;
        let step = run.step();
        let v = field.velocity(&x, run.s() as f32, &cond.task, hooks.as_deref_mut(), step)?;
        run.advance(v)?;
    }
    let hidden = hooks.map(|h| h.drain()).unwrap_or_default();
    run.finish(hidden)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(f32);
    impl VelocityField for Constant {
        fn velocity(&self, x: &Tensor<f32>, _: f32, _: &[usize], _: Option<&mut HookRegistry>, _: usize) -> Result<Tensor<f32>> {
            Ok(x.map(|_| self.0))
        }
    }

    fn cond() -> Conditioning {
        Conditioning::new(Tensor::full([1, 1, 2, 2, 1], 0.5).unwrap(), vec![0]).unwrap()
    }

    #[test]
    fn clamp_overwrites_leading_frames_only() {
        let c = cond();
        let mut x = Tensor::zeros([1, 3, 2, 2, 1]).unwrap();
        c.clamp(&mut x).unwrap();
        assert_eq!(&x.data()[..4], &[0.5; 4]);
        assert_eq!(&x.data()[4..], &[0.0; 8]);
    }

    #[test]
    fn trace_lengths() {
        let sched = Schedule::uniform(5).unwrap();
        let t = euler_sample(&Constant(0.0), &cond(), 3, 1, &sched, None, &[]).unwrap();
        assert_eq!(t.xs.len(), 6);
        assert_eq!(t.x0_hat.len(), 5);
        assert_eq!(t.velocities.len(), 5);
    }

    #[test]
    fn advance_requires_input() {
        let sched = Schedule::uniform(2).unwrap();
        let c = cond();
        let mut run = EulerRun::new(0, 2, &sched, &c, &[]).unwrap();
        assert!(run.advance(Tensor::zeros([1, 2, 2, 2, 1]).unwrap()).is_err());
    }
}

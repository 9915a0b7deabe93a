//! Velocity-regression objective and one optimizer step.

use cost_tensor::{adam_step, AdamState, Backend, Element, Rng, Tape, Tensor};

use crate::error::{Error, Result};
use crate::model::{patchify, Dit};

/// Clean videos `(B, F, H, W, C)` with their task labels. The first
/// `cond_frames` frames are the problem statement: they are clamped into
/// `x_s` and excluded from the loss, exactly as at sampling time.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub x0: Tensor<f32>,
    pub task: Vec<usize>,
    pub cond_frames: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    /// Probability of replacing an instance's task label by the null label.
    pub cond_dropout: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { cond_dropout: 0.0 }
    }
}

/// Masked mean-squared velocity error for explicit noise `x1` and levels `s`.
#[allow(clippy::too_many_arguments)]
pub fn flow_loss<T: Element, B: Backend<T>>(
    model: &Dit<T>,
    b: &B,
    x0: &Tensor<T>,
    x1: &Tensor<T>,
    s: &[T],
    task: &[usize],
    cond_frames: usize,
) -> Result<B::Value> {
    x0.expect_same_shape(x1, "flow_loss")?;
    let shape = x0.shape();
    if shape.len() != 5 || s.len() != shape[0] || cond_frames >= shape[1] {
        return Err(Error::Shape(format!(
            "batch {:?} with {} levels and {cond_frames} conditioning frames",
            shape,
            s.len()
        )));
    }
    let per_frame = shape[2] * shape[3] * shape[4];
    let per_item = shape[1] * per_frame;
    let cond_len = cond_frames * per_frame;
    let mut x_s = Vec::with_capacity(x0.numel());
    let mut target = Vec::with_capacity(x0.numel());
    let mut mask = Vec::with_capacity(x0.numel());
    for (i, (a, n)) in x0.data().iter().zip(x1.data()).enumerate() {
        let item = i / per_item;
        let cond = i % per_item < cond_len;
        let si = s[item];
        x_s.push(if cond { *a } else { (T::one() - si) * *a + si * *n });
        target.push(*n - *a);
        mask.push(if cond { T::zero() } else { T::one() });
    }
    let to_tokens = |v: Vec<T>| -> Result<Tensor<T>> {
        let (tok, _) = patchify(&Tensor::new(shape.to_vec(), v)?, model.config.patch)?;
        let rows = tok.shape()[0] * tok.shape()[1];
        Ok(tok.reshape([rows, model.config.patch_features()])?)
    };
    let count = mask.iter().filter(|m| **m != T::zero()).count();
    let target = b.constant(to_tokens(target)?);
    let mask = b.constant(to_tokens(mask)?);
    let x_s = Tensor::new(shape.to_vec(), x_s)?;

    let pred = model.velocity(b, &x_s, s, task)?;
    let diff = b.sub(&pred, &target)?;
    let sq = b.mul(&b.mul(&diff, &diff)?, &mask)?;
    let total = b.sum(&sq)?;
    Ok(b.scale(&total, T::from_f64_lossy(1.0 / count as f64))?)
}

/// Gradient of [`flow_loss`] for every parameter, in [`Dit::named_params`] order.
pub fn flow_gradients<T: Element>(
    model: &Dit<T>,
    x0: &Tensor<T>,
    x1: &Tensor<T>,
    s: &[T],
    task: &[usize],
    cond_frames: usize,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let tape = Tape::new();
    let loss = flow_loss(model, &&tape, x0, x1, s, task, cond_frames)?;
    let value = loss.value().item()?.to_f64_lossy();
    let grads = tape.backward(loss)?;
    let per_param = model
        .named_params()
        .into_iter()
        .map(|(_, p)| {
            grads
                .for_param(p)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()).expect("param shape"))
        })
        .collect();
    Ok((value, per_param))
}

/// One Adam step on explicit draws; returns the pre-update loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step_with(
    model: &mut Dit<f32>,
    x0: &Tensor<f32>,
    x1: &Tensor<f32>,
    s: &[f32],
    task: &[usize],
    cond_frames: usize,
    opt: &mut AdamState<f32>,
) -> Result<f32> {
    let (loss, grads) = flow_gradients(model, x0, x1, s, task, cond_frames)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite { what: "loss", step: opt.step_count as usize });
    }
    let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
    adam_step(&mut model.params_mut(), &grad_refs, opt)?;
    Ok(loss as f32)
}

/// Draws `x1 ~ N(0, I)` and `s ~ U(0, 1)` per instance, then takes one step.
pub fn train_step(
    model: &mut Dit<f32>,
    batch: &TrainBatch,
    rng: &mut Rng,
    opt: &mut AdamState<f32>,
    opts: &TrainOptions,
) -> Result<f32> {
    let x1 = rng.gaussian(batch.x0.shape().to_vec())?;
    let s: Vec<f32> = (0..batch.task.len()).map(|_| rng.uniform() as f32).collect();
    let null = model.config.null_task();
    let task: Vec<usize> = batch
        .task
        .iter()
        .map(|&t| if opts.cond_dropout > 0.0 && rng.bernoulli(opts.cond_dropout) { null } else { t })
        .collect();
    train_step_with(model, &batch.x0, &x1, &s, &task, batch.cond_frames, opt)
}

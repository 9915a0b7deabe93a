//! Diffusion transformer over spatiotemporal tokens.
//!
//! The stages (`embed`, `block`, `head`) are written once against
//! [`Backend`], so the training tape and the hooked inference path execute
//! the same arithmetic in the same order.

use cost_tensor::{AttnDims, Backend, Eager, Element, Rng, Tensor};

use super::config::ModelConfig;
use super::embed::{position_encoding, timestep_features};
use super::hooks::HookRegistry;
use super::patch::{patchify, unpatchify};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-6;
/// Standard deviation of the initial task-label embeddings.
const TASK_EMBED_STD: f64 = 0.02;

/// Affine map `x·W + b` with `W` stored `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Element> Linear<T> {
    fn init(rng: &mut Rng, fan_in: usize, fan_out: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n| -> Vec<T> {
            (0..n)
                .map(|_| T::from_f64_lossy((2.0 * rng.uniform() - 1.0) * bound))
                .collect()
        };
        let weight = Tensor::new([fan_in, fan_out], draw(fan_in * fan_out))?;
        let bias = if bias {
            Some(Tensor::new([fan_out], draw(fan_out))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    fn apply<B: Backend<T>>(&self, b: &B, x: &B::Value) -> Result<B::Value> {
        let y = b.matmul(x, &b.param(&self.weight))?;
        Ok(match &self.bias {
            Some(bias) => b.add_bias(&y, &b.param(bias))?,
            None => y,
        })
    }

    fn cast<U: Element>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(Tensor::cast),
        }
    }
}

/// One transformer block: modulated pre-norm attention and MLP, each with a
/// residual connection. `modulation` produces a `(shift, scale)` pair from
/// the conditioning vector, shared by both norms.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T: Element> {
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub modulation: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dit<T: Element = f32> {
    pub config: ModelConfig,
    pub input: Linear<T>,
    pub time_fc1: Linear<T>,
    pub time_fc2: Linear<T>,
    /// `(task_families + 1, D)`; the last row is the null (unconditional) label.
    pub task_table: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub head: Linear<T>,
}

/// Per-forward state shared by every block.
#[derive(Debug, Clone)]
pub struct Context<V> {
    /// `silu(c)` of the conditioning vector, `(B, D)`.
    pub cond: V,
    pub batch: usize,
    pub grid: [usize; 3],
}

impl<V> Context<V> {
    pub fn tokens(&self) -> usize {
        self.grid.iter().product()
    }
}

impl<T: Element> Dit<T> {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let pf = config.patch_features();
        let hidden = d * config.mlp_ratio;
        let input = Linear::init(rng, pf, d, true)?;
        let time_fc1 = Linear::init(rng, config.time_freq_dim, d, true)?;
        let time_fc2 = Linear::init(rng, d, d, true)?;
        let rows = config.task_families + 1;
        // Small label embeddings keep the timestep signal dominant at init.
        let mut table = vec![T::zero(); rows * d];
        rng.fill_normal(&mut table);
        let std = T::from_f64_lossy(TASK_EMBED_STD);
        table.iter_mut().for_each(|v| *v = *v * std);
        let task_table = Tensor::new([rows, d], table)?;
        let blocks = (0..config.layers)
            .map(|_| {
                Ok(Block {
                    qkv: Linear::init(rng, d, 3 * d, false)?,
                    proj: Linear::init(rng, d, d, true)?,
                    fc1: Linear::init(rng, d, hidden, true)?,
                    fc2: Linear::init(rng, hidden, d, true)?,
                    modulation: Linear::init(rng, d, 2 * d, true)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::init(rng, d, pf, true)?;
        Ok(Self { config, input, time_fc1, time_fc2, task_table, blocks, head })
    }

    /// Every parameter with a stable, unique name.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        fn push_linear<'a, T: Element>(out: &mut Vec<(String, &'a Tensor<T>)>, name: String, l: &'a Linear<T>) {
            out.push((format!("{name}.weight"), &l.weight));
            if let Some(b) = &l.bias {
                out.push((format!("{name}.bias"), b));
            }
        }
        let mut out = Vec::new();
        push_linear(&mut out, "input".into(), &self.input);
        push_linear(&mut out, "time_fc1".into(), &self.time_fc1);
        push_linear(&mut out, "time_fc2".into(), &self.time_fc2);
        out.push(("task_table".into(), &self.task_table));
        for (i, blk) in self.blocks.iter().enumerate() {
            push_linear(&mut out, format!("blocks.{i}.qkv"), &blk.qkv);
            push_linear(&mut out, format!("blocks.{i}.proj"), &blk.proj);
            push_linear(&mut out, format!("blocks.{i}.fc1"), &blk.fc1);
            push_linear(&mut out, format!("blocks.{i}.fc2"), &blk.fc2);
            push_linear(&mut out, format!("blocks.{i}.modulation"), &blk.modulation);
        }
        push_linear(&mut out, "head".into(), &self.head);
        out
    }

    /// Mutable parameters in the same order as [`Dit::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        fn lin<'a, T: Element>(out: &mut Vec<&'a mut Tensor<T>>, l: &'a mut Linear<T>) {
            out.push(&mut l.weight);
            if let Some(b) = &mut l.bias {
                out.push(b);
            }
        }
        let mut out = Vec::new();
        lin(&mut out, &mut self.input);
        lin(&mut out, &mut self.time_fc1);
        lin(&mut out, &mut self.time_fc2);
        out.push(&mut self.task_table);
        for blk in &mut self.blocks {
            lin(&mut out, &mut blk.qkv);
            lin(&mut out, &mut blk.proj);
            lin(&mut out, &mut blk.fc1);
            lin(&mut out, &mut blk.fc2);
            lin(&mut out, &mut blk.modulation);
        }
        lin(&mut out, &mut self.head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> Dit<U> {
        Dit {
            config: self.config.clone(),
            input: self.input.cast(),
            time_fc1: self.time_fc1.cast(),
            time_fc2: self.time_fc2.cast(),
            task_table: self.task_table.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    qkv: b.qkv.cast(),
                    proj: b.proj.cast(),
                    fc1: b.fc1.cast(),
                    fc2: b.fc2.cast(),
                    modulation: b.modulation.cast(),
                })
                .collect(),
            head: self.head.cast(),
        }
    }

    fn check_video(&self, video: &Tensor<T>) -> Result<usize> {
        let c = &self.config;
        let shape = video.shape();
        if shape.len() != 5 || shape[2] != c.video[1] || shape[3] != c.video[2] || shape[4] != c.channels {
            return Err(Error::Shape(format!(
                "video {:?} does not match (B, F, {}, {}, {})",
                shape, c.video[1], c.video[2], c.channels
            )));
        }
        if shape[1] % c.patch[0] != 0 {
            return Err(Error::Shape(format!(
                "frame count {} not divisible by temporal patch {}",
                shape[1], c.patch[0]
            )));
        }
        Ok(shape[0])
    }

    fn conditioning<B: Backend<T>>(&self, b: &B, s: &[T], task: &[usize]) -> Result<B::Value> {
        if s.len() != task.len() {
            return Err(Error::Shape(format!("{} timesteps for {} task labels", s.len(), task.len())));
        }
        for &v in s {
            let v = v.to_f64_lossy();
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Timestep(v));
            }
        }
        let rows = self.config.task_families + 1;
        let mut onehot = vec![T::zero(); task.len() * rows];
        for (i, &t) in task.iter().enumerate() {
            if t >= rows {
                return Err(Error::Config(format!("task label {t} outside {rows} embedding rows")));
            }
            onehot[i * rows + t] = T::one();
        }
        let feats = b.constant(timestep_features(s, self.config.time_freq_dim));
        let h = b.silu(&self.time_fc1.apply(b, &feats)?)?;
        let temb = self.time_fc2.apply(b, &h)?;
        let onehot = b.constant(Tensor::new([task.len(), rows], onehot)?);
        let temb_task = b.matmul(&onehot, &b.param(&self.task_table))?;
        Ok(b.add(&temb, &temb_task)?)
    }

    /// Learned embedding `(D)` of a single timestep.
    pub fn timestep_embed(&self, s: f64) -> Result<Tensor<T>> {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Timestep(s));
        }
        let b = Eager;
        let feats = timestep_features(&[T::from_f64_lossy(s)], self.config.time_freq_dim);
        let h = b.silu(&self.time_fc1.apply(&b, &feats)?)?;
        let out = self.time_fc2.apply(&b, &h)?;
        Ok(out.reshape([self.config.dim])?)
    }

    /// Token embedding: patch projection plus position encoding, and the
    /// shared block context. Returns `(B·N, D)` tokens.
    pub fn embed<B: Backend<T>>(
        &self,
        b: &B,
        video: &Tensor<T>,
        s: &[T],
        task: &[usize],
    ) -> Result<(B::Value, Context<B::Value>)> {
        let batch = self.check_video(video)?;
        let (tokens, grid) = patchify(video, self.config.patch)?;
        let n: usize = grid.iter().product();
        let pf = self.config.patch_features();
        let x = b.constant(tokens.reshape([batch * n, pf])?);
        let pos = position_encoding::<T>(grid, self.config.dim);
        let mut tiled = Vec::with_capacity(batch * pos.numel());
        for _ in 0..batch {
            tiled.extend_from_slice(pos.data());
        }
        let pos = b.constant(Tensor::new([batch * n, self.config.dim], tiled)?);
        let h = b.add(&self.input.apply(b, &x)?, &pos)?;
        let c = self.conditioning(b, s, task)?;
        let cond = b.silu(&c)?;
        Ok((h, Context { cond, batch, grid }))
    }

    /// Block `layer` applied to `(B·N, D)` tokens; returns the post-residual output.
    pub fn block<B: Backend<T>>(
        &self,
        b: &B,
        layer: usize,
        x: &B::Value,
        ctx: &Context<B::Value>,
    ) -> Result<B::Value> {
        let blk = self
            .blocks
            .get(layer)
            .ok_or_else(|| Error::Hook(format!("layer {layer} outside {} blocks", self.blocks.len())))?;
        let d = self.config.dim;
        let n = ctx.tokens();
        let eps = T::from_f64_lossy(LN_EPS);
        let m = blk.modulation.apply(b, &ctx.cond)?;
        let shift = b.repeat_rows(&b.slice_cols(&m, 0, d)?, n)?;
        let scale = b.repeat_rows(&b.add_scalar(&b.slice_cols(&m, d, d)?, T::one())?, n)?;
        let modulate = |v: &B::Value| -> Result<B::Value> {
            Ok(b.add(&b.mul(&b.layer_norm(v, eps)?, &scale)?, &shift)?)
        };

        let a = modulate(x)?;
        let qkv = blk.qkv.apply(b, &a)?;
        let q = b.slice_cols(&qkv, 0, d)?;
        let k = b.slice_cols(&qkv, d, d)?;
        let v = b.slice_cols(&qkv, 2 * d, d)?;
        let dims = AttnDims { batch: ctx.batch, seq: n, heads: self.config.heads, dim: d };
        let att = b.attention(&q, &k, &v, dims)?;
        let x = b.add(x, &blk.proj.apply(b, &att)?)?;

        let m = modulate(&x)?;
        let hidden = b.gelu(&blk.fc1.apply(b, &m)?)?;
        Ok(b.add(&x, &blk.fc2.apply(b, &hidden)?)?)
    }

    /// Output projection to patch features, `(B·N, patch_features)`.
    pub fn head<B: Backend<T>>(&self, b: &B, x: &B::Value) -> Result<B::Value> {
        let y = b.layer_norm(x, T::from_f64_lossy(LN_EPS))?;
        self.head.apply(b, &y)
    }

    /// Reassembles head output into a `(B, F, H, W, C)` video.
    pub fn to_video(&self, tokens: &Tensor<T>, ctx_batch: usize, grid: [usize; 3]) -> Result<Tensor<T>> {
        let n: usize = grid.iter().product();
        let t = tokens.clone().reshape([ctx_batch, n, self.config.patch_features()])?;
        unpatchify(&t, grid, self.config.patch, self.config.channels)
    }

    /// Conditional velocity in token layout `(B·N, patch_features)`, without hooks.
    pub fn velocity<B: Backend<T>>(
        &self,
        b: &B,
        video: &Tensor<T>,
        s: &[T],
        task: &[usize],
    ) -> Result<B::Value> {
        let (mut h, ctx) = self.embed(b, video, s, task)?;
        for layer in 0..self.blocks.len() {
            h = self.block(b, layer, &h, &ctx)?;
        }
        self.head(b, &h)
    }
}

impl Dit<f32> {
    /// One hooked pass: block outputs pass through `hooks` (injection, then
    /// capture) at diffusion step `step`.
    pub fn forward_pass(
        &self,
        x_s: &Tensor<f32>,
        s: f32,
        task: &[usize],
        hooks: Option<&mut HookRegistry>,
        step: usize,
    ) -> Result<Tensor<f32>> {
        let b = Eager;
        let batch = self.check_video(x_s)?;
        let svec = vec![s; batch];
        let (mut h, ctx) = self.embed(&b, x_s, &svec, task)?;
        let mut hooks = hooks.filter(|h| h.wants_step(step));
        for layer in 0..self.blocks.len() {
            h = self.block(&b, layer, &h, &ctx)?;
            if let Some(reg) = hooks.as_deref_mut() {
                reg.after_block(step, layer, &mut h, batch, ctx.grid)?;
            }
        }
        let out = self.head(&b, &h)?;
        if !out.is_finite() {
            return Err(Error::NonFinite { what: "velocity", step });
        }
        self.to_video(&out, batch, ctx.grid)
    }

    /// Guided velocity `v_u + w·(v_c − v_u)`. With `w = 1` only the
    /// conditional pass runs. Hooks observe and act on the conditional pass.
    pub fn forward(
        &self,
        x_s: &Tensor<f32>,
        s: f32,
        task: &[usize],
        mut hooks: Option<&mut HookRegistry>,
        step: usize,
    ) -> Result<Tensor<f32>> {
        if let Some(reg) = hooks.as_deref() {
            if let Some(l) = reg.max_layer() {
                if l >= self.config.layers {
                    return Err(Error::Hook(format!(
                        "hook references layer {l} but the model has {} layers",
                        self.config.layers
                    )));
                }
            }
        }
        let v_c = self.forward_pass(x_s, s, task, hooks.as_deref_mut(), step)?;
        self.guide(x_s, s, task, step, v_c)
    }

    /// Combines a conditional velocity with the unconditional pass.
    pub fn guide(&self, x_s: &Tensor<f32>, s: f32, task: &[usize], step: usize, v_c: Tensor<f32>) -> Result<Tensor<f32>> {
        let w = self.config.guidance_scale;
        if w == 1.0 {
            return Ok(v_c);
        }
        let null = vec![self.config.null_task(); task.len()];
        let v_u = self.forward_pass(x_s, s, &null, None, step)?;
        Ok(v_u.zip_map(&v_c, "guidance", |u, c| u + w * (c - u))?)
    }
}

//! Central-difference gradient verification.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A scalar-valued function of taped inputs.
pub type ScalarFn<'f> = dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'f;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Maximum over all input coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(f: &ScalarFn<'_>, inputs: &[Tensor<f64>], h: f64) -> Result<f64> {
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| {
                grads
                    .wrt(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()).expect("shape"))
            })
            .collect::<Vec<_>>()
    };
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let v = f(&tape, &vars)?.value().item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFinite("grad_check"))
        }
    };
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..work[which].numel() {
            let orig = work[which].data()[i];
            work[which].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[which].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            if a.is_nan() || numeric.is_nan() {
                return Err(TensorError::NonFinite("grad_check"));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// One named scalar objective over random inputs.
pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub f: Box<ScalarFn<'static>>,
}

fn randn(seed: u64, shape: &[usize]) -> Tensor<f64> {
    crate::Rng::new(seed).gaussian(shape.to_vec()).expect("shape")
}

/// Contracts `y` with a fixed random weight so every output coordinate
/// contributes a distinct factor to the gradient.
fn weighted<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let w = randn(seed ^ 0xABCD, &y.shape());
    y.mul(tape.constant(w))?.sum()
}

/// Random-shaped objectives exercising every differentiable primitive once.
pub fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut r = crate::Rng::new(seed);
    let (m, n, k) = (1 + r.below(5), 1 + r.below(5), 1 + r.below(5));
    let s = seed;
    let heads = 1 + r.below(2);
    let dims = crate::AttnDims { batch: 1 + r.below(2), seq: 2 + r.below(4), heads, dim: heads * (1 + r.below(3)) };
    let attn = [dims.batch * dims.seq, dims.dim];
    let axis = (s % 3) as usize;
    vec![
        Case {
            name: "matmul",
            inputs: vec![randn(s, &[m, k]), randn(s + 100, &[k, n])],
            f: Box::new(move |t, x| weighted(t, x[0].matmul(x[1])?, s)),
        },
        Case {
            name: "add/sub/mul/scale/add_scalar",
            inputs: vec![randn(s, &[m, n]), randn(s + 1, &[m, n])],
            f: Box::new(move |t, x| {
                let y = x[0].add(x[1])?.mul(x[0].sub(x[1])?)?;
                weighted(t, y.scale(1.7)?.add_scalar(0.3)?, s)
            }),
        },
        Case {
            name: "add_bias/repeat_rows/slice_cols/reshape",
            inputs: vec![randn(s, &[m, n + 1]), randn(s + 1, &[n + 1])],
            f: Box::new(move |t, x| {
                let y = x[0].add_bias(x[1])?.repeat_rows(k)?.slice_cols(1, n)?;
                weighted(t, y.reshape([m * k * n])?, s)
            }),
        },
        Case {
            name: "layer_norm",
            inputs: vec![randn(s, &[m, n + 1])],
            f: Box::new(move |t, x| weighted(t, x[0].layer_norm(1e-5)?, s)),
        },
        Case {
            name: "gelu/silu",
            inputs: vec![randn(s, &[m, n])],
            f: Box::new(move |t, x| weighted(t, x[0].gelu()?, s)?.add(weighted(t, x[0].silu()?, s + 7)?)),
        },
        Case {
            name: "attention",
            inputs: vec![randn(s, &attn), randn(s + 1, &attn), randn(s + 2, &attn)],
            f: Box::new(move |t, x| weighted(t, x[0].attention(x[1], x[2], dims)?, s)),
        },
        Case {
            name: "reduce_l2/sum/mean",
            inputs: vec![randn(s, &[m, n, k])],
            f: Box::new(move |t, x| weighted(t, x[0].reduce_l2(axis)?, s)?.add(x[0].mean()?)),
        },
    ]
}

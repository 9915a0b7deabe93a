//! Linear centred kernel alignment between representation matrices.

use cost_tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::SampleTrace;
use crate::model::HiddenState;

/// Column-centred copy of an `(n, d)` matrix, in f64.
fn centred<T: Element>(x: &Tensor<T>) -> Result<(usize, usize, Vec<f64>)> {
    if x.rank() != 2 {
        return Err(Error::Analysis(format!("CKA expects a matrix, got {:?}", x.shape())));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut out: Vec<f64> = x.data().iter().map(|v| v.to_f64_lossy()).collect();
    for j in 0..d {
        let mean = (0..n).map(|i| out[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            out[i * d + j] -= mean;
        }
    }
    Ok((n, d, out))
}

/// `‖Aᵀ B‖²_F` for row-major `(n, da)` and `(n, db)` matrices.
fn cross_sq(n: usize, a: &[f64], da: usize, b: &[f64], db: usize) -> f64 {
    let mut m = vec![0.0f64; da * db];
    for i in 0..n {
        let (ra, rb) = (&a[i * da..(i + 1) * da], &b[i * db..(i + 1) * db]);
        for (p, &av) in ra.iter().enumerate() {
            let row = &mut m[p * db..(p + 1) * db];
            for (q, &bv) in rb.iter().enumerate() {
                row[q] += av * bv;
            }
        }
    }
    m.iter().map(|v| v * v).sum()
}

/// `‖Yᵀ X‖²_F / (‖Xᵀ X‖_F · ‖Yᵀ Y‖_F)` on column-centred inputs, in f64.
/// Returns 0 when either centred matrix vanishes. Bit-identical inputs give
/// exactly 1.
pub fn linear_cka<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let (n, dx, xc) = centred(x)?;
    let (ny, dy, yc) = centred(y)?;
    if n != ny {
        return Err(Error::Analysis(format!("CKA row counts differ: {n} vs {ny}")));
    }
    if n < 2 {
        return Err(Error::Analysis("CKA needs at least two rows".into()));
    }
    let xx = cross_sq(n, &xc, dx, &xc, dx);
    let yy = cross_sq(n, &yc, dy, &yc, dy);
    if xx == 0.0 || yy == 0.0 {
        return Ok(0.0);
    }
    let xy = cross_sq(n, &yc, dy, &xc, dx);
    Ok(xy / (xx * yy).sqrt())
}

/// Representation compared across runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// Clean-state estimates, tokens as rows and channels as columns.
    #[default]
    X0Hat,
    /// Captured block outputs at one layer, tokens as rows.
    Hidden { layer: usize },
}

/// `1 − CKA` between a clean run and one perturbed run per injection step,
/// averaged over the instances of the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CkaMatrix {
    /// `(injection steps, measure steps)`, entries in `[0, 1]`.
    pub values: Tensor<f64>,
    /// Per-instance matrices, same layout.
    pub per_instance: Vec<Tensor<f64>>,
    pub injection_steps: Vec<usize>,
    pub measure_steps: Vec<usize>,
}

/// Splits a batched video-shaped tensor `(B, F, H, W, C)` into one
/// `(F·H·W, C)` matrix per instance.
fn rows_per_instance(x: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(Error::Analysis(format!("expected (B, F, H, W, C), got {s:?}")));
    }
    let rows = s[1] * s[2] * s[3];
    x.data()
        .chunks(rows * s[4])
        .map(|c| Ok(Tensor::new([rows, s[4]], c.to_vec())?))
        .collect()
}

fn hidden_per_instance(h: &[HiddenState], step: usize, layer: usize) -> Result<Vec<Tensor<f32>>> {
    let st = h
        .iter()
        .find(|s| s.step == step && s.layer == layer)
        .ok_or_else(|| Error::Analysis(format!("no hidden state captured at step {step}, layer {layer}")))?;
    let s = st.tokens.shape();
    st.tokens
        .data()
        .chunks(s[1] * s[2])
        .map(|c| Ok(Tensor::new([s[1], s[2]], c.to_vec())?))
        .collect()
}

fn representation(trace: &SampleTrace, step: usize, repr: Representation) -> Result<Vec<Tensor<f32>>> {
    match repr {
        Representation::X0Hat => rows_per_instance(&trace.x0_hat[step]),
        Representation::Hidden { layer } => hidden_per_instance(&trace.hidden, step, layer),
    }
}

/// Builds the injection-by-measure dissimilarity matrix. `perturbed[i]` must
/// share the clean run's seed and schedule and carry the intervention at
/// `injection_steps[i]`.
pub fn cka_matrix(
    clean: &SampleTrace,
    perturbed: &[SampleTrace],
    injection_steps: &[usize],
    repr: Representation,
) -> Result<CkaMatrix> {
    if perturbed.len() != injection_steps.len() || perturbed.is_empty() {
        return Err(Error::Analysis(format!(
            "{} perturbed runs for {} injection steps",
            perturbed.len(),
            injection_steps.len()
        )));
    }
    let n_measure = clean.x0_hat.len();
    for p in perturbed {
        if p.schedule != clean.schedule || p.seed != clean.seed {
            return Err(Error::Analysis("perturbed run does not share the clean run's schedule and seed".into()));
        }
    }
    let clean_reprs = (0..n_measure)
        .map(|j| representation(clean, j, repr))
        .collect::<Result<Vec<_>>>()?;
    let batch = clean_reprs[0].len();
    let ni = injection_steps.len();
    let mut per_instance = vec![vec![0.0f64; ni * n_measure]; batch];
    for (i, p) in perturbed.iter().enumerate() {
        for (j, clean_j) in clean_reprs.iter().enumerate() {
            let pert_j = representation(p, j, repr)?;
            for b in 0..batch {
                let d = 1.0 - linear_cka(&clean_j[b], &pert_j[b])?;
                per_instance[b][i * n_measure + j] = d.clamp(0.0, 1.0);
            }
        }
    }
    let mut mean = vec![0.0f64; ni * n_measure];
    for m in &per_instance {
        for (a, v) in mean.iter_mut().zip(m) {
            *a += v;
        }
    }
    for v in &mut mean {
        *v /= batch as f64;
    }
    Ok(CkaMatrix {
        values: Tensor::new([ni, n_measure], mean)?,
        per_instance: per_instance
            .into_iter()
            .map(|m| Ok(Tensor::new([ni, n_measure], m)?))
            .collect::<Result<_>>()?,
        injection_steps: injection_steps.to_vec(),
        measure_steps: (0..n_measure).collect(),
    })
}

/// Per-instance `1 − CKA` between two batched videos `(B, F, H, W, C)`,
/// clamped to `[0, 1]`.
pub fn video_dissimilarity(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Vec<f64>> {
    let (ra, rb) = (rows_per_instance(a)?, rows_per_instance(b)?);
    if ra.len() != rb.len() {
        return Err(Error::Analysis(format!("batch sizes differ: {} vs {}", ra.len(), rb.len())));
    }
    ra.iter().zip(&rb).map(|(x, y)| Ok((1.0 - linear_cka(x, y)?).clamp(0.0, 1.0))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use cost_tensor::Rng;

    #[test]
    fn self_similarity_and_errors() {
        let x: Tensor<f64> = Rng::new(0).gaussian([10, 3]).unwrap();
        assert_eq!(linear_cka(&x, &x).unwrap(), 1.0);
        let one: Tensor<f64> = Tensor::zeros([1, 3]).unwrap();
        assert!(linear_cka(&one, &one).is_err());
        let y: Tensor<f64> = Rng::new(1).gaussian([9, 3]).unwrap();
        assert!(linear_cka(&x, &y).is_err());
        let z: Tensor<f64> = Tensor::full([10, 2], 3.0).unwrap();
        assert_eq!(linear_cka(&x, &z).unwrap(), 0.0);
    }
}

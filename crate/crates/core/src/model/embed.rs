//! Fixed sinusoidal features for timesteps and token positions.

use cost_tensor::{Element, Tensor};

/// `[sin(x·ω_0) .. sin(x·ω_{k-1}), cos(x·ω_0) .. cos(x·ω_{k-1})]` with
/// `ω_i = 10000^(-i/k)` and `k = dim / 2`.
pub fn sinusoid(x: f64, dim: usize, out: &mut [f64]) {
    let half = dim / 2;
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (x * freq).sin();
        out[half + i] = (x * freq).cos();
    }
}

/// Per-example timestep features `(B, dim)` of `1000·s`.
pub fn timestep_features<T: Element>(s: &[T], dim: usize) -> Tensor<T> {
    let mut row = vec![0.0; dim];
    let mut data = Vec::with_capacity(s.len() * dim);
    for &v in s {
        sinusoid(1000.0 * v.to_f64_lossy(), dim, &mut row);
        data.extend(row.iter().map(|&x| T::from_f64_lossy(x)));
    }
    Tensor::new([s.len(), dim], data).expect("non-empty batch")
}

/// Additive 3D-factorized position encoding `(N, dim)` for a token grid.
/// The channel budget is split into `a, a, dim - 2a` for the frame, row and
/// column axes, where `a` is `dim / 3` rounded down to even.
pub fn position_encoding<T: Element>(grid: [usize; 3], dim: usize) -> Tensor<T> {
    let a = (dim / 3) & !1;
    let parts = [a, a, dim - 2 * a];
    let n = grid.iter().product::<usize>();
    let mut data = Vec::with_capacity(n * dim);
    let mut buf = vec![0.0; dim];
    for f in 0..grid[0] {
        for h in 0..grid[1] {
            for w in 0..grid[2] {
                let mut off = 0;
                for (coord, &len) in [f, h, w].iter().zip(&parts) {
                    sinusoid(*coord as f64, len, &mut buf[off..off + len]);
                    off += len;
                }
                data.extend(buf.iter().map(|&x| T::from_f64_lossy(x)));
            }
        }
    }
    Tensor::new([n, dim], data).expect("non-empty grid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_are_distinct() {
        let pe: Tensor<f64> = position_encoding([3, 2, 2], 12);
        let rows: Vec<&[f64]> = pe.data().chunks(12).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                assert_ne!(rows[i], rows[j]);
            }
        }
    }
}

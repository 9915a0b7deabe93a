//! Forward and backward kernels shared by the eager and taped backends.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Strided matrix view into a slice.
#[derive(Clone, Copy)]
pub(crate) struct View<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    pub fn row_major(data: &'a [T], offset: usize, rows: usize, cols: usize, rs: usize) -> Self {
        Self { data, offset, rows, cols, rs, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn last(&self) -> usize {
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// `c[offset..] = alpha * a·b + beta * c` with `c` row-major at stride `rsc`.
pub(crate) fn gemm<T: Element>(
    alpha: T,
    a: View<'_, T>,
    b: View<'_, T>,
    beta: T,
    c: &mut [T],
    c_offset: usize,
    rsc: usize,
) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(c_offset + (m - 1) * rsc + n <= c.len(), "gemm output bounds");
    if k == 0 {
        for i in 0..m {
            for v in &mut c[c_offset + i * rsc..c_offset + i * rsc + n] {
                *v = beta * *v;
            }
        }
        return;
    }
    assert!(a.last() < a.data.len() && b.last() < b.data.len(), "gemm input bounds");
    // SAFETY: all three views were bounds-checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            rsc as isize,
            1,
        );
    }
}

fn expect_rank<T: Element>(t: &Tensor<T>, rank: usize, op: &'static str) -> Result<()> {
    if t.rank() != rank {
        return Err(TensorError::Rank {
            op,
            expected: rank,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(a, 2, "matmul")?;
    expect_rank(b, 2, "matmul")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    gemm(
        T::one(),
        View::row_major(a.data(), 0, m, k, k),
        View::row_major(b.data(), 0, k, n, n),
        T::zero(),
        &mut out,
        0,
        n,
    );
    Tensor::new([m, n], out)
}

/// Gradients of `a·b` given the output gradient.
pub fn matmul_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut da = vec![T::zero(); m * k];
    gemm(
        T::one(),
        View::row_major(g.data(), 0, m, n, n),
        View::row_major(b.data(), 0, k, n, n).t(),
        T::zero(),
        &mut da,
        0,
        k,
    );
    let mut db = vec![T::zero(); k * n];
    gemm(
        T::one(),
        View::row_major(a.data(), 0, m, k, k).t(),
        View::row_major(g.data(), 0, m, n, n),
        T::zero(),
        &mut db,
        0,
        n,
    );
    (
        Tensor::new([m, k], da).expect("shape"),
        Tensor::new([k, n], db).expect("shape"),
    )
}

/// Adds `bias` along the trailing dimension.
pub fn add_bias<T: Element>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let n = trailing(x);
    if bias.rank() != 1 || bias.shape()[0] != n {
        return Err(TensorError::ShapeMismatch {
            op: "add_bias",
            lhs: x.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v = *v + b;
        }
    }
    Ok(out)
}

pub fn column_sums<T: Element>(g: &Tensor<T>, n: usize) -> Tensor<T> {
    let mut acc = vec![T::zero(); n];
    for row in g.data().chunks(n) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
    Tensor::new([n], acc).expect("shape")
}

fn trailing<T: Element>(x: &Tensor<T>) -> usize {
    x.shape().last().copied().unwrap_or(1)
}

/// Repeats each row of a rank-2 tensor `times` times consecutively.
pub fn repeat_rows<T: Element>(x: &Tensor<T>, times: usize) -> Result<Tensor<T>> {
    expect_rank(x, 2, "repeat_rows")?;
    if times == 0 {
        return Err(TensorError::Invalid("repeat_rows: times must be positive".into()));
    }
    let (r, n) = (x.shape()[0], x.shape()[1]);
    let mut out = Vec::with_capacity(r * times * n);
    for row in x.data().chunks(n) {
        for _ in 0..times {
            out.extend_from_slice(row);
        }
    }
    Tensor::new([r * times, n], out)
}

pub fn repeat_rows_backward<T: Element>(g: &Tensor<T>, rows: usize, times: usize) -> Tensor<T> {
    let n = g.shape()[1];
    let mut out = vec![T::zero(); rows * n];
    for (i, row) in g.data().chunks(n).enumerate() {
        let dst = &mut out[(i / times) * n..(i / times + 1) * n];
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = *d + v;
        }
    }
    Tensor::new([rows, n], out).expect("shape")
}

/// Columns `start..start + len` of a rank-2 tensor.
pub fn slice_cols<T: Element>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    expect_rank(x, 2, "slice_cols")?;
    let (r, n) = (x.shape()[0], x.shape()[1]);
    if len == 0 || start + len > n {
        return Err(TensorError::Invalid(format!(
            "slice_cols: {start}..{} outside {n} columns",
            start + len
        )));
    }
    let mut out = Vec::with_capacity(r * len);
    for row in x.data().chunks(n) {
        out.extend_from_slice(&row[start..start + len]);
    }
    Tensor::new([r, len], out)
}

pub fn slice_cols_backward<T: Element>(g: &Tensor<T>, cols: usize, start: usize) -> Tensor<T> {
    let (r, len) = (g.shape()[0], g.shape()[1]);
    let mut out = vec![T::zero(); r * cols];
    for (i, row) in g.data().chunks(len).enumerate() {
        out[i * cols + start..i * cols + start + len].copy_from_slice(row);
    }
    Tensor::new([r, cols], out).expect("shape")
}

/// Normalizes each trailing-dimension row to zero mean and unit variance.
/// Returns the output and the per-row reciprocal standard deviation.
pub fn layer_norm<T: Element>(x: &Tensor<T>, eps: T) -> (Tensor<T>, Vec<T>) {
    let n = trailing(x);
    let nf = T::from_usize(n).expect("row length");
    let mut out = x.clone();
    let mut rstd = Vec::with_capacity(x.numel() / n);
    for row in out.data_mut().chunks_mut(n) {
        let mean = row.iter().copied().sum::<T>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let r = (var + eps).sqrt().recip();
        for v in row.iter_mut() {
            *v = (*v - mean) * r;
        }
        rstd.push(r);
    }
    (out, rstd)
}

pub fn layer_norm_backward<T: Element>(y: &Tensor<T>, rstd: &[T], g: &Tensor<T>) -> Tensor<T> {
    let n = trailing(y);
    let nf = T::from_usize(n).expect("row length");
    let mut dx = g.clone();
    for ((drow, yrow), &r) in dx.data_mut().chunks_mut(n).zip(y.data().chunks(n)).zip(rstd) {
        let mean_g = drow.iter().copied().sum::<T>() / nf;
        let mean_gy = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() / nf;
        for (d, &yv) in drow.iter_mut().zip(yrow) {
            *d = r * (*d - mean_g - yv * mean_gy);
        }
    }
    dx
}

fn gelu_consts<T: Element>() -> (T, T) {
    (
        T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()),
        T::from_f64_lossy(0.044715),
    )
}

/// `tanh` through a single `exp`, which is markedly cheaper than the libm
/// routine; saturates correctly at both ends.
#[inline]
fn fast_tanh<T: Element>(u: T) -> T {
    let two = T::one() + T::one();
    T::one() - two / ((two * u).fast_exp() + T::one())
}

/// Tanh approximation of GELU.
pub fn gelu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let (c, a) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    x.map(|v| half * v * (T::one() + fast_tanh(c * (v + a * v * v * v))))
}

pub fn gelu_backward<T: Element>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let (c, a) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    x.zip_map(g, "gelu_backward", |v, gv| {
        let t = fast_tanh(c * (v + a * v * v * v));
        let d = half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v);
        gv * d
    })
    .expect("same shape")
}

pub fn silu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v / (T::one() + (-v).fast_exp()))
}

pub fn silu_backward<T: Element>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    x.zip_map(g, "silu_backward", |v, gv| {
        let s = (T::one() + (-v).fast_exp()).recip();
        gv * s * (T::one() + v * (T::one() - s))
    })
    .expect("same shape")
}

/// Geometry of a fused multi-head self-attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub dim: usize,
}

impl AttnDims {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn check<T: Element>(&self, t: &Tensor<T>) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(TensorError::Invalid(format!(
                "attention: dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if t.shape() != [self.batch * self.seq, self.dim] {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: t.shape().to_vec(),
                rhs: vec![self.batch * self.seq, self.dim],
            });
        }
        Ok(())
    }
}

/// Unmasked scaled dot-product attention over `[batch*seq, dim]` inputs,
/// heads laid out as contiguous column blocks. Returns the output and the
/// attention probabilities `[batch, heads, seq, seq]`.
pub fn attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    dims: AttnDims,
) -> Result<(Tensor<T>, Vec<T>)> {
    dims.check(q)?;
    dims.check(k)?;
    dims.check(v)?;
    let AttnDims { batch, seq, heads, dim } = dims;
    let dh = dims.head_dim();
    let scale = T::from_usize(dh).expect("head dim").sqrt().recip();
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    let mut out = vec![T::zero(); batch * seq * dim];
    for b in 0..batch {
        for h in 0..heads {
            let off = b * seq * dim + h * dh;
            let p_off = (b * heads + h) * seq * seq;
            let p = &mut probs[p_off..p_off + seq * seq];
            gemm(
                scale,
                View::row_major(q.data(), off, seq, dh, dim),
                View::row_major(k.data(), off, seq, dh, dim).t(),
                T::zero(),
                p,
                0,
                seq,
            );
            for row in p.chunks_mut(seq) {
                softmax_row(row);
            }
            gemm(
                T::one(),
                View::row_major(&probs[p_off..p_off + seq * seq], 0, seq, seq, seq),
                View::row_major(v.data(), off, seq, dh, dim),
                T::zero(),
                &mut out,
                off,
                dim,
            );
        }
    }
    Ok((Tensor::new([batch * seq, dim], out)?, probs))
}

/// Reductions over eight independent lanes so the compiler can vectorize
/// them; the lanes are combined in a fixed order.
const LANES: usize = 8;

fn lane_max<T: Element>(xs: &[T]) -> T {
    let mut acc = [T::neg_infinity(); LANES];
    let chunks = xs.chunks_exact(LANES);
    let rest = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a = if v > *a { v } else { *a };
        }
    }
    let mut m = T::neg_infinity();
    for &v in acc.iter().chain(rest) {
        m = if v > m { v } else { m };
    }
    m
}

fn lane_dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    acc.iter().fold(T::zero(), |s, &v| s + v) + tail
}

fn lane_sum<T: Element>(xs: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder().iter().fold(T::zero(), |s, &v| s + v);
    for c in chunks {
        for i in 0..LANES {
            acc[i] = acc[i] + c[i];
        }
    }
    acc.iter().fold(T::zero(), |s, &v| s + v) + tail
}

fn softmax_row<T: Element>(row: &mut [T]) {
    let max = lane_max(row);
    for v in row.iter_mut() {
        *v = (*v - max).fast_exp();
    }
    let inv = lane_sum(row).recip();
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

pub fn attention_backward<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &[T],
    g: &Tensor<T>,
    dims: AttnDims,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let AttnDims { batch, seq, heads, dim } = dims;
    let dh = dims.head_dim();
    let scale = T::from_usize(dh).expect("head dim").sqrt().recip();
    let mut dq = vec![T::zero(); batch * seq * dim];
    let mut dk = vec![T::zero(); batch * seq * dim];
    let mut dv = vec![T::zero(); batch * seq * dim];
    let mut dp = vec![T::zero(); seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = b * seq * dim + h * dh;
            let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            let p_view = View::row_major(p, 0, seq, seq, seq);
            let g_view = View::row_major(g.data(), off, seq, dh, dim);
            // dV = Pᵀ·dO
            gemm(T::one(), p_view.t(), g_view, T::zero(), &mut dv, off, dim);
            // dP = dO·Vᵀ
            gemm(
                T::one(),
                g_view,
                View::row_major(v.data(), off, seq, dh, dim).t(),
                T::zero(),
                &mut dp,
                0,
                seq,
            );
            for (drow, prow) in dp.chunks_mut(seq).zip(p.chunks(seq)) {
                let dot = lane_dot(drow, prow);
                for (d, &pv) in drow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            let ds_view = View::row_major(&dp, 0, seq, seq, seq);
            gemm(
                T::one(),
                ds_view,
                View::row_major(k.data(), off, seq, dh, dim),
                T::zero(),
                &mut dq,
                off,
                dim,
            );
            gemm(
                T::one(),
                ds_view.t(),
                View::row_major(q.data(), off, seq, dh, dim),
                T::zero(),
                &mut dk,
                off,
                dim,
            );
        }
    }
    let shape = [batch * seq, dim];
    (
        Tensor::new(shape, dq).expect("shape"),
        Tensor::new(shape, dk).expect("shape"),
        Tensor::new(shape, dv).expect("shape"),
    )
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Euclidean norm along `axis`; the axis is removed from the shape.
pub fn reduce_l2<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(TensorError::AxisOutOfRange { axis, rank: x.rank() });
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = vec![T::zero(); outer * inner];
    let d = x.data();
    for o in 0..outer {
        for a in 0..len {
            let base = (o * len + a) * inner;
            for i in 0..inner {
                let v = d[base + i];
                out[o * inner + i] = out[o * inner + i] + v * v;
            }
        }
    }
    for v in &mut out {
        *v = v.sqrt();
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::new(shape, out)
}

pub fn reduce_l2_backward<T: Element>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    g: &Tensor<T>,
    axis: usize,
) -> Tensor<T> {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut dx = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for a in 0..len {
            let base = (o * len + a) * inner;
            for i in 0..inner {
                let norm = y.data()[o * inner + i];
                if norm > T::zero() {
                    dx[base + i] = g.data()[o * inner + i] * x.data()[base + i] / norm;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), dx).expect("shape")
}

/// Sum of all elements, accumulated in f64.
pub fn sum<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(T::from_f64_lossy(x.sum_f64()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        Tensor::from_fn([m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            (0..k).map(|p| a.data()[i * k + p] * b.data()[p * n + j]).sum()
        })
        .unwrap()
    }

    #[test]
    fn matmul_identity_and_small_products() {
        let x = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&Tensor::<f64>::eye(2).unwrap(), &x).unwrap(), x);
        let a = Tensor::new([1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new([2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f32>::zeros([2, 3]).unwrap();
        let b = Tensor::<f32>::zeros([2, 3]).unwrap();
        assert!(matches!(matmul(&a, &b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = crate::Rng::new(7);
        let a: Tensor<f64> = rng.gaussian([5, 4]).unwrap();
        let b: Tensor<f64> = rng.gaussian([4, 3]).unwrap();
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive(&a, &b)).unwrap() <= 1e-12);
    }

    #[test]
    fn reduce_l2_cases() {
        let v = Tensor::new([2], vec![3.0f64, 4.0]).unwrap();
        assert_eq!(reduce_l2(&v, 0).unwrap().data(), &[5.0]);
        let z = Tensor::<f64>::zeros([3, 2]).unwrap();
        assert!(reduce_l2(&z, 1).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(matches!(
            reduce_l2(&z, 2),
            Err(TensorError::AxisOutOfRange { axis: 2, rank: 2 })
        ));

        let mut rng = crate::Rng::new(3);
        let x: Tensor<f64> = rng.gaussian([2, 7]).unwrap();
        let y = reduce_l2(&x, 1).unwrap();
        for r in 0..2 {
            let mut acc = 0.0;
            for c in 0..7 {
                acc += x.data()[r * 7 + c] * x.data()[r * 7 + c];
            }
            assert!((y.data()[r] - acc.sqrt()).abs() <= 1e-12);
        }
    }

    #[test]
    fn reduce_l2_middle_axis() {
        let x = Tensor::from_fn([2, 3, 2], |i| i as f64).unwrap();
        let y = reduce_l2(&x, 1).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        let expect = (0.0f64 * 0.0 + 2.0 * 2.0 + 4.0 * 4.0).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = crate::Rng::new(11);
        let dims = AttnDims { batch: 2, seq: 5, heads: 2, dim: 4 };
        let q: Tensor<f64> = rng.gaussian([10, 4]).unwrap();
        let k: Tensor<f64> = rng.gaussian([10, 4]).unwrap();
        let v: Tensor<f64> = rng.gaussian([10, 4]).unwrap();
        let (_, probs) = attention(&q, &k, &v, dims).unwrap();
        for row in probs.chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

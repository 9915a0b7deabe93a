//! A common op surface so model code can run taped (training, gradient
//! checks) or eager (sampling, probing) without duplication.

use crate::element::Element;
use crate::error::Result;
use crate::kernels::{self, AttnDims};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub trait Backend<T: Element> {
    type Value: Clone;

    fn constant(&self, t: Tensor<T>) -> Self::Value;
    fn param(&self, t: &Tensor<T>) -> Self::Value;
    fn to_tensor(&self, v: &Self::Value) -> Tensor<T>;
    fn shape(&self, v: &Self::Value) -> Vec<usize>;

    fn matmul(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn add(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn add_bias(&self, x: &Self::Value, bias: &Self::Value) -> Result<Self::Value>;
    fn scale(&self, x: &Self::Value, c: T) -> Result<Self::Value>;
    fn add_scalar(&self, x: &Self::Value, c: T) -> Result<Self::Value>;
    fn repeat_rows(&self, x: &Self::Value, times: usize) -> Result<Self::Value>;
    fn slice_cols(&self, x: &Self::Value, start: usize, len: usize) -> Result<Self::Value>;
    fn layer_norm(&self, x: &Self::Value, eps: T) -> Result<Self::Value>;
    fn gelu(&self, x: &Self::Value) -> Result<Self::Value>;
    fn silu(&self, x: &Self::Value) -> Result<Self::Value>;
    fn attention(
        &self,
        q: &Self::Value,
        k: &Self::Value,
        v: &Self::Value,
        dims: AttnDims,
    ) -> Result<Self::Value>;
    fn reduce_l2(&self, x: &Self::Value, axis: usize) -> Result<Self::Value>;
    fn sum(&self, x: &Self::Value) -> Result<Self::Value>;
    fn mean(&self, x: &Self::Value) -> Result<Self::Value>;
    fn reshape(&self, x: &Self::Value, shape: &[usize]) -> Result<Self::Value>;
}

impl<'t, T: Element> Backend<T> for &'t Tape<T> {
    type Value = Var<'t, T>;

    fn constant(&self, t: Tensor<T>) -> Var<'t, T> {
        Tape::constant(self, t)
    }
    fn param(&self, t: &Tensor<T>) -> Var<'t, T> {
        Tape::param(self, t)
    }
    fn to_tensor(&self, v: &Var<'t, T>) -> Tensor<T> {
        v.value().clone()
    }
    fn shape(&self, v: &Var<'t, T>) -> Vec<usize> {
        v.shape()
    }
    fn matmul(&self, a: &Var<'t, T>, b: &Var<'t, T>) -> Result<Var<'t, T>> {
        a.matmul(*b)
    }
    fn add(&self, a: &Var<'t, T>, b: &Var<'t, T>) -> Result<Var<'t, T>> {
        a.add(*b)
    }
    fn sub(&self, a: &Var<'t, T>, b: &Var<'t, T>) -> Result<Var<'t, T>> {
        a.sub(*b)
    }
    fn mul(&self, a: &Var<'t, T>, b: &Var<'t, T>) -> Result<Var<'t, T>> {
        a.mul(*b)
    }
    fn add_bias(&self, x: &Var<'t, T>, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.add_bias(*bias)
    }
    fn scale(&self, x: &Var<'t, T>, c: T) -> Result<Var<'t, T>> {
        x.scale(c)
    }
    fn add_scalar(&self, x: &Var<'t, T>, c: T) -> Result<Var<'t, T>> {
        x.add_scalar(c)
    }
    fn repeat_rows(&self, x: &Var<'t, T>, times: usize) -> Result<Var<'t, T>> {
        x.repeat_rows(times)
    }
    fn slice_cols(&self, x: &Var<'t, T>, start: usize, len: usize) -> Result<Var<'t, T>> {
        x.slice_cols(start, len)
    }
    fn layer_norm(&self, x: &Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        x.layer_norm(eps)
    }
    fn gelu(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.gelu()
    }
    fn silu(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.silu()
    }
    fn attention(
        &self,
        q: &Var<'t, T>,
        k: &Var<'t, T>,
        v: &Var<'t, T>,
        dims: AttnDims,
    ) -> Result<Var<'t, T>> {
        q.attention(*k, *v, dims)
    }
    fn reduce_l2(&self, x: &Var<'t, T>, axis: usize) -> Result<Var<'t, T>> {
        x.reduce_l2(axis)
    }
    fn sum(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.sum()
    }
    fn mean(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.mean()
    }
    fn reshape(&self, x: &Var<'t, T>, shape: &[usize]) -> Result<Var<'t, T>> {
        x.reshape(shape.to_vec())
    }
}

/// Immediate evaluation with no recording.
#[derive(Debug, Clone, Copy, Default)]
pub struct Eager;

fn finite<T: Element>(t: Tensor<T>, op: &'static str) -> Result<Tensor<T>> {
    t.ensure_finite(op)
}

impl<T: Element> Backend<T> for Eager {
    type Value = Tensor<T>;

    fn constant(&self, t: Tensor<T>) -> Tensor<T> {
        t
    }
    fn param(&self, t: &Tensor<T>) -> Tensor<T> {
        t.clone()
    }
    fn to_tensor(&self, v: &Tensor<T>) -> Tensor<T> {
        v.clone()
    }
    fn shape(&self, v: &Tensor<T>) -> Vec<usize> {
        v.shape().to_vec()
    }
    fn matmul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        finite(kernels::matmul(a, b)?, "matmul")
    }
    fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        finite(a.zip_map(b, "add", |x, y| x + y)?, "add")
    }
    fn sub(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        finite(a.zip_map(b, "sub", |x, y| x - y)?, "sub")
    }
    fn mul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        finite(a.zip_map(b, "mul", |x, y| x * y)?, "mul")
    }
    fn add_bias(&self, x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        finite(kernels::add_bias(x, bias)?, "add_bias")
    }
    fn scale(&self, x: &Tensor<T>, c: T) -> Result<Tensor<T>> {
        finite(x.map(|v| v * c), "scale")
    }
    fn add_scalar(&self, x: &Tensor<T>, c: T) -> Result<Tensor<T>> {
        finite(x.map(|v| v + c), "add_scalar")
    }
    fn repeat_rows(&self, x: &Tensor<T>, times: usize) -> Result<Tensor<T>> {
        kernels::repeat_rows(x, times)
    }
    fn slice_cols(&self, x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        kernels::slice_cols(x, start, len)
    }
    fn layer_norm(&self, x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        finite(kernels::layer_norm(x, eps).0, "layer_norm")
    }
    fn gelu(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        finite(kernels::gelu(x), "gelu")
    }
    fn silu(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        finite(kernels::silu(x), "silu")
    }
    fn attention(
        &self,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        dims: AttnDims,
    ) -> Result<Tensor<T>> {
        finite(kernels::attention(q, k, v, dims)?.0, "attention")
    }
    fn reduce_l2(&self, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        finite(kernels::reduce_l2(x, axis)?, "reduce_l2")
    }
    fn sum(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        finite(kernels::sum(x), "sum")
    }
    fn mean(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = T::from_usize(x.numel()).expect("count");
        finite(kernels::sum(x).map(|v| v * n.recip()), "mean")
    }
    fn reshape(&self, x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        x.clone().reshape(shape.to_vec())
    }
}

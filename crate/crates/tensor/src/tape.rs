//! Reverse-mode differentiation over a linear tape.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::kernels::{self, AttnDims};
use crate::tensor::Tensor;

/// Backward rule for a user-defined operation: given the output gradient,
/// the inputs and the output, return one gradient per input.
pub type CustomBackward<T> =
    Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Vec<Tensor<T>>>;

pub(crate) enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    AddBias(usize, usize),
    RepeatRows { x: usize, times: usize },
    SliceCols { x: usize, start: usize },
    LayerNorm { x: usize, rstd: Vec<T> },
    Gelu(usize),
    Silu(usize),
    Attention { q: usize, k: usize, v: usize, dims: AttnDims, probs: Vec<T> },
    ReduceL2 { x: usize, axis: usize },
    Sum(usize),
    Reshape(usize),
    Custom { inputs: Vec<usize>, backward: CustomBackward<T> },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddBias(a, b) => vec![*a, *b],
            Scale(x, _) | AddScalar(x) | Gelu(x) | Silu(x) | Sum(x) | Reshape(x) => vec![*x],
            RepeatRows { x, .. } | SliceCols { x, .. } | LayerNorm { x, .. } | ReduceL2 { x, .. } => {
                vec![*x]
            }
            Attention { q, k, v, .. } => vec![*q, *k, *v],
            Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in execution order so gradients can be propagated
/// backwards. Node inputs always precede the node itself.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<usize, usize>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Element> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Element> Copy for Var<'_, T> {}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, op_name: &'static str) -> Result<Var<'_, T>> {
        let value = value.ensure_finite(op_name)?;
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Trainable leaf keyed by the parameter's address, so the same tensor
    /// used twice maps to one node and its gradient can be looked up later.
    pub fn param(&self, value: &Tensor<T>) -> Var<'_, T> {
        let key = value as *const Tensor<T> as usize;
        if let Some(&id) = self.params.borrow().get(&key) {
            return Var { tape: self, id };
        }
        let var = self.leaf(value.clone(), true);
        self.params.borrow_mut().insert(key, var.id);
        var
    }

    fn own(&self, v: &Var<'_, T>) -> Result<usize> {
        if std::ptr::eq(v.tape, self) {
            Ok(v.id)
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    pub fn value(&self, v: Var<'_, T>) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.id].value)
    }

    /// Records an operation with a caller-supplied backward rule.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t, T>],
        forward: impl FnOnce(&[&Tensor<T>]) -> Result<Tensor<T>>,
        backward: CustomBackward<T>,
    ) -> Result<Var<'t, T>> {
        let ids = inputs.iter().map(|v| self.own(v)).collect::<Result<Vec<_>>>()?;
        let out = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Tensor<T>> = ids.iter().map(|&i| &nodes[i].value).collect();
            forward(&refs)?
        };
        self.push(out, Op::Custom { inputs: ids, backward }, "custom")
    }

    /// Propagates d(loss)/d(node) to every node that requires grad.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Grads<T>> {
        let loss_id = self.own(&loss)?;
        if self.consumed.replace(true) {
            return Err(TensorError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss_id].value;
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        if !nodes[loss_id].requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss_id] = Some(Tensor::full(lv.shape().to_vec(), T::one())?);
        for id in (0..=loss_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let contributions = backward_node(&nodes, node, &g);
            for (input, dg) in contributions {
                if !nodes[input].requires_grad {
                    continue;
                }
                accumulate(&mut grads[input], dg);
            }
            grads[id] = Some(g);
        }
        let by_param = self.params.borrow().clone();
        Ok(Grads { grads, by_param })
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, dg: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, &d) in acc.data_mut().iter_mut().zip(dg.data()) {
                *a = *a + d;
            }
        }
        None => *slot = Some(dg),
    }
}

fn backward_node<T: Element>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
    let val = |i: usize| &nodes[i].value;
    let with_shape = |t: Tensor<T>, i: usize| t.reshape(val(i).shape().to_vec()).expect("grad shape");
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (da, db) = kernels::matmul_backward(val(*a), val(*b), g);
            vec![(*a, da), (*b, db)]
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
        Op::Mul(a, b) => vec![
            (*a, g.zip_map(val(*b), "mul", |x, y| x * y).expect("shape")),
            (*b, g.zip_map(val(*a), "mul", |x, y| x * y).expect("shape")),
        ],
        Op::Scale(x, c) => vec![(*x, g.map(|v| v * *c))],
        Op::AddScalar(x) => vec![(*x, g.clone())],
        Op::AddBias(x, b) => {
            let n = val(*b).numel();
            vec![(*x, g.clone()), (*b, kernels::column_sums(g, n))]
        }
        Op::RepeatRows { x, times } => {
            vec![(*x, kernels::repeat_rows_backward(g, val(*x).shape()[0], *times))]
        }
        Op::SliceCols { x, start } => {
            vec![(*x, kernels::slice_cols_backward(g, val(*x).shape()[1], *start))]
        }
        Op::LayerNorm { x, rstd } => vec![(*x, kernels::layer_norm_backward(&node.value, rstd, g))],
        Op::Gelu(x) => vec![(*x, kernels::gelu_backward(val(*x), g))],
        Op::Silu(x) => vec![(*x, kernels::silu_backward(val(*x), g))],
        Op::Attention { q, k, v, dims, probs } => {
            let (dq, dk, dv) = kernels::attention_backward(val(*q), val(*k), val(*v), probs, g, *dims);
            vec![(*q, dq), (*k, dk), (*v, dv)]
        }
        Op::ReduceL2 { x, axis } => {
            vec![(*x, kernels::reduce_l2_backward(val(*x), &node.value, g, *axis))]
        }
        Op::Sum(x) => {
            let gv = g.data()[0];
            vec![(*x, Tensor::full(val(*x).shape().to_vec(), gv).expect("shape"))]
        }
        Op::Reshape(x) => vec![(*x, with_shape(g.clone(), *x))],
        Op::Custom { inputs, backward } => {
            let refs: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
            let out = backward(g, &refs, &node.value);
            inputs.iter().copied().zip(out).collect()
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    by_param: HashMap<usize, usize>,
}

impl<T: Element> Grads<T> {
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for a tensor registered through [`Tape::param`].
    pub fn for_param(&self, p: &Tensor<T>) -> Option<&Tensor<T>> {
        let key = p as *const Tensor<T> as usize;
        self.by_param
            .get(&key)
            .and_then(|&id| self.grads[id].as_ref())
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(
        self,
        name: &'static str,
        f: impl FnOnce(&Tensor<T>) -> Result<(Tensor<T>, Op<T>)>,
    ) -> Result<Self> {
        let (out, op) = {
            let v = self.value();
            f(&v)?
        };
        self.tape.push(out, op, name)
    }

    fn binary(
        self,
        other: Self,
        name: &'static str,
        f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
        op: Op<T>,
    ) -> Result<Self> {
        self.tape.own(&other)?;
        let out = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)?
        };
        self.tape.push(out, op, name)
    }

    pub fn matmul(self, other: Self) -> Result<Self> {
        self.binary(other, "matmul", kernels::matmul, Op::MatMul(self.id, other.id))
    }

    pub fn add(self, other: Self) -> Result<Self> {
        self.binary(other, "add", |a, b| a.zip_map(b, "add", |x, y| x + y), Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.binary(other, "sub", |a, b| a.zip_map(b, "sub", |x, y| x - y), Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        self.binary(other, "mul", |a, b| a.zip_map(b, "mul", |x, y| x * y), Op::Mul(self.id, other.id))
    }

    pub fn add_bias(self, bias: Self) -> Result<Self> {
        self.binary(bias, "add_bias", kernels::add_bias, Op::AddBias(self.id, bias.id))
    }

    pub fn scale(self, c: T) -> Result<Self> {
        self.unary("scale", |x| Ok((x.map(|v| v * c), Op::Scale(self.id, c))))
    }

    pub fn add_scalar(self, c: T) -> Result<Self> {
        self.unary("add_scalar", |x| Ok((x.map(|v| v + c), Op::AddScalar(self.id))))
    }

    pub fn repeat_rows(self, times: usize) -> Result<Self> {
        self.unary("repeat_rows", |x| {
            Ok((kernels::repeat_rows(x, times)?, Op::RepeatRows { x: self.id, times }))
        })
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Self> {
        self.unary("slice_cols", |x| {
            Ok((kernels::slice_cols(x, start, len)?, Op::SliceCols { x: self.id, start }))
        })
    }

    pub fn layer_norm(self, eps: T) -> Result<Self> {
        self.unary("layer_norm", |x| {
            let (y, rstd) = kernels::layer_norm(x, eps);
            Ok((y, Op::LayerNorm { x: self.id, rstd }))
        })
    }

    pub fn gelu(self) -> Result<Self> {
        self.unary("gelu", |x| Ok((kernels::gelu(x), Op::Gelu(self.id))))
    }

    pub fn silu(self) -> Result<Self> {
        self.unary("silu", |x| Ok((kernels::silu(x), Op::Silu(self.id))))
    }

    pub fn attention(self, k: Self, v: Self, dims: AttnDims) -> Result<Self> {
        self.tape.own(&k)?;
        self.tape.own(&v)?;
        let (out, probs) = {
            let nodes = self.tape.nodes.borrow();
            kernels::attention(&nodes[self.id].value, &nodes[k.id].value, &nodes[v.id].value, dims)?
        };
        let op = Op::Attention {
            q: self.id,
            k: k.id,
            v: v.id,
            dims,
            probs,
        };
        self.tape.push(out, op, "attention")
    }

    pub fn reduce_l2(self, axis: usize) -> Result<Self> {
        self.unary("reduce_l2", |x| Ok((kernels::reduce_l2(x, axis)?, Op::ReduceL2 { x: self.id, axis })))
    }

    pub fn sum(self) -> Result<Self> {
        self.unary("sum", |x| Ok((kernels::sum(x), Op::Sum(self.id))))
    }

    pub fn mean(self) -> Result<Self> {
        let n = self.value().numel();
        self.sum()?.scale(T::from_usize(n).expect("count").recip())
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        self.unary("reshape", |x| Ok((x.clone().reshape(shape)?, Op::Reshape(self.id))))
    }
}

//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one rollout in execution order.
//! [`Tape::backward`] replays the record in reverse, so each node is visited
//! exactly once and gradients reaching a node along several paths are summed.
//! Call [`Tape::reset`] between rollouts; the borrow checker guarantees no
//! [`Var`] outlives it.

mod conv;
mod gru;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use conv::ConvDims;

pub use gru::{gru_step, ConvWeights, GruWeights};

/// A linear map that can be embedded in the graph. Its backward pass is the
/// transpose map, so implementors must provide an exact adjoint.
pub trait LinearMap<T: Element> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn transpose(&self, y: &Tensor<T>) -> Result<Tensor<T>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Tanh,
    Sigmoid,
    Softplus,
    Relu,
    Recip,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::Relu => "relu",
            Unary::Recip => "recip",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op<T: Element> {
    Leaf,
    Binary(Binary, usize, usize),
    Scale(usize, T),
    Unary(Unary, usize),
    Expand(usize),
    BatchScale(usize, usize),
    Concat(Vec<usize>),
    Slice { x: usize, start: usize },
    Conv { x: usize, w: usize, b: Option<usize>, dims: ConvDims },
    ConvTranspose { x: usize, w: usize, b: Option<usize>, dims: ConvDims },
    Sum(usize),
    Mse(usize, usize),
    Linear { x: usize, map: Rc<dyn LinearMap<T>>, transposed: bool },
}

impl<T: Element> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Binary(_, a, b) | Op::BatchScale(a, b) | Op::Mse(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Unary(_, a) | Op::Expand(a) | Op::Sum(a) => vec![*a],
            Op::Slice { x, .. } | Op::Linear { x, .. } => vec![*x],
            Op::Concat(xs) => xs.clone(),
            Op::Conv { x, w, b, .. } | Op::ConvTranspose { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
        }
    }
}

struct Node<T: Element> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record for one rollout.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    /// Trainable leaf: receives a gradient from [`Tape::backward`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn record(&self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var<'_, T>> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push(value, op, requires_grad))
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        assert!(std::ptr::eq(self, loss.tape), "loss recorded on a different tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, contrib) in vjp(&nodes, node, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        for (id, node) in nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[id] = None;
            } else if grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a trainable leaf; `None` for constants and interior nodes.
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

fn unary_grad<T: Element>(kind: Unary, x: &Tensor<T>, y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let one = T::one();
    let data = match kind {
        Unary::Tanh => izip3(g, y, |g, y| g * (one - y * y)),
        Unary::Sigmoid => izip3(g, y, |g, y| g * y * (one - y)),
        Unary::Softplus => izip3(g, x, |g, x| g * sigmoid(x)),
        Unary::Relu => izip3(g, x, |g, x| if x > T::zero() { g } else { T::zero() }),
        Unary::Recip => izip3(g, y, |g, y| -g * y * y),
    };
    Tensor::new(x.shape().to_vec(), data).expect("unary grad shape")
}

fn izip3<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    a.data().iter().zip(b.data()).map(|(&a, &b)| f(a, b)).collect()
}

#[inline]
pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Element>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log(1 + e^-|x|)
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn vjp<T: Element>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
    let val = |i: usize| &*nodes[i].value;
    let needs = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => vec![],
        Op::Binary(kind, a, b) => match kind {
            Binary::Add => vec![(*a, g.clone()), (*b, g.clone())],
            Binary::Sub => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Binary::Mul => {
                let mut out = Vec::with_capacity(2);
                if needs(*a) {
                    out.push((*a, g.zip_map(val(*b), "mul", |g, y| g * y).expect("mul grad")));
                }
                if needs(*b) {
                    out.push((*b, g.zip_map(val(*a), "mul", |g, x| g * x).expect("mul grad")));
                }
                out
            }
        },
        Op::Scale(a, c) => vec![(*a, g.map(|v| v * *c))],
        Op::Unary(kind, a) => vec![(*a, unary_grad(*kind, val(*a), &node.value, g))],
        Op::Expand(a) => vec![(*a, Tensor::scalar(g.sum()))],
        Op::BatchScale(x, s) => {
            let (xv, sv) = (val(*x), val(*s));
            let mut out = Vec::with_capacity(2);
            if needs(*x) {
                let mut dx = g.clone();
                for n in 0..dx.batch() {
                    let sn = sv.data()[n];
                    dx.item_mut(n).iter_mut().for_each(|v| *v *= sn);
                }
                out.push((*x, dx));
            }
            if needs(*s) {
                let ds: Vec<T> =
                    (0..xv.batch()).map(|n| g.item(n).iter().zip(xv.item(n)).map(|(&a, &b)| a * b).sum()).collect();
                out.push((*s, Tensor::new(sv.shape().to_vec(), ds).expect("batch scale grad")));
            }
            out
        }
        Op::Concat(parts) => {
            let total = g.shape()[1];
            let plane: usize = g.shape()[2..].iter().product();
            let mut offset = 0;
            let mut out = Vec::with_capacity(parts.len());
            for &p in parts {
                let c = val(p).shape()[1];
                if needs(p) {
                    out.push((p, slice_channels(g, offset, c, total, plane)));
                }
                offset += c;
            }
            out
        }
        Op::Slice { x, start } => {
            let xs = val(*x).shape();
            let (total, c) = (xs[1], g.shape()[1]);
            let plane: usize = xs[2..].iter().product();
            let mut dx = Tensor::zeros(xs.to_vec());
            for n in 0..xs[0] {
                let dst = &mut dx.item_mut(n)[start * plane..(start + c) * plane];
                dst.copy_from_slice(g.item(n));
            }
            debug_assert!(start + c <= total);
            vec![(*x, dx)]
        }
        Op::Conv { x, w, b, dims } => {
            let need = [needs(*x), needs(*w), b.is_some_and(needs)];
            let cg = conv::conv_backward(val(*x), val(*w), g, dims, need);
            collect_conv(*x, *w, *b, cg)
        }
        Op::ConvTranspose { x, w, b, dims } => {
            let need = [needs(*x), needs(*w), b.is_some_and(needs)];
            let cg = conv::conv_transpose_backward(val(*x), val(*w), g, dims, need);
            collect_conv(*x, *w, *b, cg)
        }
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape().to_vec(), g.data()[0]))],
        Op::Mse(p, t) => {
            let (pv, tv) = (val(*p), val(*t));
            let k = T::of(2.0) * g.data()[0] / T::of(pv.len() as f64);
            let dp = pv.zip_map(tv, "mse", |a, b| k * (a - b)).expect("mse grad");
            let mut out = Vec::with_capacity(2);
            if needs(*t) {
                out.push((*t, dp.map(|v| -v)));
            }
            out.push((*p, dp));
            out
        }
        Op::Linear { x, map, transposed } => {
            let dx = if *transposed { map.forward(g) } else { map.transpose(g) };
            vec![(*x, dx.expect("linear map backward"))]
        }
    }
}

fn collect_conv<T: Element>(x: usize, w: usize, b: Option<usize>, cg: conv::ConvGrads<T>) -> Vec<(usize, Tensor<T>)> {
    let mut out = Vec::with_capacity(3);
    out.extend(cg.dx.map(|d| (x, d)));
    out.extend(cg.dw.map(|d| (w, d)));
    if let (Some(b), Some(db)) = (b, cg.db) {
        out.push((b, db));
    }
    out
}

fn slice_channels<T: Element>(x: &Tensor<T>, start: usize, len: usize, total: usize, plane: usize) -> Tensor<T> {
    let n = x.batch();
    let mut data = Vec::with_capacity(n * len * plane);
    for b in 0..n {
        let item = &x.data()[b * total * plane..(b + 1) * total * plane];
        data.extend_from_slice(&item[start * plane..(start + len) * plane]);
    }
    let mut shape = x.shape().to_vec();
    shape[1] = len;
    Tensor::new(shape, data).expect("slice shape")
}

impl<'t, T: Element> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant((*self.value()).clone())
    }

    fn same_tape(&self, other: &Var<'_, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars recorded on different tapes");
    }

    fn binary(&self, other: Var<'t, T>, kind: Binary) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (name, out) = match kind {
            Binary::Add => ("add", a.zip_map(&b, "add", |x, y| x + y)?),
            Binary::Sub => ("sub", a.zip_map(&b, "sub", |x, y| x - y)?),
            Binary::Mul => ("mul", a.zip_map(&b, "mul", |x, y| x * y)?),
        };
        self.tape.record(name, out, Op::Binary(kind, self.id, other.id))
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Mul)
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t, T>> {
        let c = T::of(c);
        let out = self.value().map(|v| v * c);
        self.tape.record("scale", out, Op::Scale(self.id, c))
    }

    fn unary(&self, kind: Unary) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = match kind {
            Unary::Tanh => x.map(|v| v.tanh()),
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Softplus => x.map(softplus),
            Unary::Relu => x.map(|v| v.max(T::zero())),
            Unary::Recip => x.map(|v| T::one() / v),
        };
        self.tape.record(kind.name(), out, Op::Unary(kind, self.id))
    }

    pub fn tanh(&self) -> Result<Var<'t, T>> {
        self.unary(Unary::Tanh)
    }

    pub fn sigmoid(&self) -> Result<Var<'t, T>> {
        self.unary(Unary::Sigmoid)
    }

    pub fn softplus(&self) -> Result<Var<'t, T>> {
        self.unary(Unary::Softplus)
    }

    pub fn relu(&self) -> Result<Var<'t, T>> {
        self.unary(Unary::Relu)
    }

    pub fn recip(&self) -> Result<Var<'t, T>> {
        self.unary(Unary::Recip)
    }

    /// Broadcasts a single-element tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.len() != 1 {
            return Err(Error::ShapeMismatch { op: "expand", lhs: x.shape().to_vec(), rhs: vec![1] });
        }
        self.tape.record("expand", Tensor::full(shape.to_vec(), x.data()[0]), Op::Expand(self.id))
    }

    /// Multiplies batch item `n` by `s[n]`.
    pub fn batch_scale(&self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&s);
        let (x, sv) = (self.value(), s.value());
        if sv.shape() != [x.batch()] {
            return Err(Error::ShapeMismatch { op: "batch_scale", lhs: x.shape().to_vec(), rhs: sv.shape().to_vec() });
        }
        let mut out = (*x).clone();
        for n in 0..out.batch() {
            let k = sv.data()[n];
            out.item_mut(n).iter_mut().for_each(|v| *v *= k);
        }
        self.tape.record("batch_scale", out, Op::BatchScale(self.id, s.id))
    }

    /// Concatenates `N x C_i x ...` tensors along the channel axis.
    pub fn concat(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| crate::error::invalid("concat of zero tensors"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape();
        for v in &values {
            let s = v.shape();
            if s.len() < 2 || s[0] != base[0] || s[2..] != base[2..] {
                return Err(Error::ShapeMismatch { op: "concat", lhs: base.to_vec(), rhs: s.to_vec() });
            }
        }
        let plane: usize = base[2..].iter().product();
        let channels: usize = values.iter().map(|v| v.shape()[1]).sum();
        let mut data = Vec::with_capacity(base[0] * channels * plane);
        for n in 0..base[0] {
            for v in &values {
                data.extend_from_slice(v.item(n));
            }
        }
        let mut shape = base.to_vec();
        shape[1] = channels;
        let ids = parts.iter().map(|p| {
            first.same_tape(p);
            p.id
        });
        let op = Op::Concat(ids.collect());
        first.tape.record("concat", Tensor::new(shape, data)?, op)
    }

    /// Channels `start..start + len` of an `N x C x ...` tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() < 2 || len == 0 || start + len > s[1] {
            return Err(crate::error::invalid(format!("channel slice {start}+{len} of {s:?}")));
        }
        let plane: usize = s[2..].iter().product();
        let out = slice_channels(&x, start, len, s[1], plane);
        self.tape.record("slice", out, Op::Slice { x: self.id, start })
    }

    /// Same-padded 2-D convolution; `w` is `Cout x Cin x k x k`.
    pub fn conv2d(&self, w: Var<'t, T>, b: Option<Var<'t, T>>, stride: usize, dilation: usize) -> Result<Var<'t, T>> {
        let (x, wv) = (self.value(), w.value());
        let dims = conv::conv_dims(&x, &wv, stride, dilation)?;
        let bv = b.map(|b| b.value());
        let out = conv::conv_forward(&x, &wv, bv.as_deref(), &dims)?;
        let op = Op::Conv { x: self.id, w: w.id, b: b.map(|b| b.id), dims };
        self.tape.record("conv2d", out, op)
    }

    /// Transpose of [`Var::conv2d`] with the same weight layout, producing an
    /// `out_hw` sized map.
    pub fn conv2d_transpose(
        &self,
        w: Var<'t, T>,
        b: Option<Var<'t, T>>,
        stride: usize,
        dilation: usize,
        out_hw: (usize, usize),
    ) -> Result<Var<'t, T>> {
        let (x, wv) = (self.value(), w.value());
        let dims = conv::conv_transpose_dims(&x, &wv, stride, dilation, out_hw)?;
        let bv = b.map(|b| b.value());
        let out = conv::conv_transpose_forward(&x, &wv, bv.as_deref(), &dims)?;
        let op = Op::ConvTranspose { x: self.id, w: w.id, b: b.map(|b| b.id), dims };
        self.tape.record("conv2d_transpose", out, op)
    }

    pub fn sum(&self) -> Result<Var<'t, T>> {
        let s = self.value().sum();
        self.tape.record("sum", Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Var<'t, T>> {
        let n = self.value().len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Mean squared error against `target`.
    pub fn mse(&self, target: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&target);
        let (p, t) = (self.value(), target.value());
        p.check_same_shape(&t, "mse")?;
        let n = T::of(p.len() as f64);
        let s: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        self.tape.record("mse", Tensor::scalar(s / n), Op::Mse(self.id, target.id))
    }

    /// Applies a linear map (or its transpose) as a graph node.
    pub fn linear(&self, map: Rc<dyn LinearMap<T>>, transposed: bool) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = if transposed { map.transpose(&x)? } else { map.forward(&x)? };
        self.tape.record("linear", out, Op::Linear { x: self.id, map, transposed })
    }
}

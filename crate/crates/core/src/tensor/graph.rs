//! Append-only tape of operations and the reverse sweep over it.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::broadcast::{binary, binary_backward};
use super::conv::{self, ConvCfg};
use super::gemm::gemm;
use super::resample;
use super::shape;
use super::special::{self, RegionStats, SimilarityState};
use super::{split_axis, Tensor};
use crate::error::{Axis, Error, Result};

type Id = usize;

enum Op {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Div(Id, Id),
    Scale(Id, f64),
    Shift(Id),
    Relu(Id),
    LeakyRelu(Id, f64),
    Sigmoid(Id),
    Tanh(Id),
    Log(Id),
    Abs(Id),
    Square(Id),
    Sqrt(Id),
    Clamp(Id, f64, f64),
    Sum(Id),
    Mean(Id),
    SumAxis(Id, usize),
    MatMul(Id, Id),
    Conv2d { x: Id, w: Id, b: Option<Id>, cfg: ConvCfg },
    Deconv2d { x: Id, w: Id, b: Option<Id>, cfg: ConvCfg },
    Reshape(Id),
    Permute(Id, Vec<usize>),
    Concat(Vec<Id>, usize),
    Narrow { x: Id, axis: usize, start: usize, len: usize },
    Resize { x: Id, oh: usize, ow: usize },
    AvgPool(Id, usize),
    Softmax(Id, usize),
    RegionNorm(Id, RegionStats),
    PatchSim(Id, SimilarityState),
}

struct Node {
    value: Rc<Tensor>,
    op: Rc<Op>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// A single-threaded recording of a forward computation.
///
/// Nodes are appended in evaluation order, so reverse append order is a valid
/// topological order for the backward sweep. Gradients flowing into a node
/// from several consumers are summed.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: Id,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input (weights, or anything a gradient is wanted for).
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Rc::new(op),
            requires_grad,
            grad: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: Id) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn rg(&self, id: Id) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn unary(&self, x: Id, value: Tensor, op: Op) -> Var<'_> {
        self.push(value, op, self.rg(x))
    }

    /// Accumulated gradient of a node after [`Graph::backward`].
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Populates gradients of every differentiable leaf with `d loss / d leaf`.
    /// Leaf gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let len = self.value(loss.id).len();
        if len != 1 {
            return Err(Error::contract(format!("backward needs a scalar loss, got {len} elements")));
        }
        {
            let mut nodes = self.nodes.borrow_mut();
            for n in nodes.iter_mut() {
                if !matches!(*n.op, Op::Leaf) {
                    n.grad = None;
                }
            }
            if !nodes[loss.id].requires_grad {
                return Ok(());
            }
            accumulate(&mut nodes[loss.id], vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let (op, grad) = {
                let mut nodes = self.nodes.borrow_mut();
                let node = &mut nodes[id];
                if !node.requires_grad || matches!(*node.op, Op::Leaf) {
                    continue;
                }
                let Some(g) = node.grad.take() else { continue };
                (Rc::clone(&node.op), g)
            };
            let contributions = self.local_grads(id, &op, grad);
            let mut nodes = self.nodes.borrow_mut();
            for (input, g) in contributions {
                if nodes[input].requires_grad {
                    accumulate(&mut nodes[input], g);
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, id: Id, op: &Op, grad: Vec<f64>) -> Vec<(Id, Vec<f64>)> {
        let g: &[f64] = &grad;
        let out = self.value(id);
        let val = |i: Id| self.value(i);
        let ew = |x: Id, f: &dyn Fn(f64, f64) -> f64| -> Vec<(Id, Vec<f64>)> {
            let xv = val(x);
            vec![(x, xv.data().iter().zip(g).map(|(&a, &gv)| f(a, gv)).collect())]
        };
        let ew_out = |x: Id, f: &dyn Fn(f64, f64) -> f64| -> Vec<(Id, Vec<f64>)> {
            vec![(x, out.data().iter().zip(g).map(|(&y, &gv)| f(y, gv)).collect())]
        };
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (ga, gb) = match op {
                    Op::Add(..) => binary_backward(&av, &bv, g, self.rg(*a), self.rg(*b), |_, _, g| g, |_, _, g| g),
                    Op::Sub(..) => binary_backward(&av, &bv, g, self.rg(*a), self.rg(*b), |_, _, g| g, |_, _, g| -g),
                    Op::Mul(..) => {
                        binary_backward(&av, &bv, g, self.rg(*a), self.rg(*b), |_, y, g| g * y, |x, _, g| g * x)
                    }
                    _ => binary_backward(
                        &av,
                        &bv,
                        g,
                        self.rg(*a),
                        self.rg(*b),
                        |_, y, g| g / y,
                        |x, y, g| -g * x / (y * y),
                    ),
                };
                let mut r = Vec::new();
                if let Some(ga) = ga {
                    r.push((*a, ga));
                }
                if let Some(gb) = gb {
                    r.push((*b, gb));
                }
                r
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::Shift(x) => vec![(*x, grad)],
            Op::Relu(x) => ew(*x, &|a, g| if a > 0.0 { g } else { 0.0 }),
            Op::LeakyRelu(x, s) => ew(*x, &|a, g| if a > 0.0 { g } else { g * s }),
            Op::Sigmoid(x) => ew_out(*x, &|y, g| g * y * (1.0 - y)),
            Op::Tanh(x) => ew_out(*x, &|y, g| g * (1.0 - y * y)),
            Op::Log(x) => ew(*x, &|a, g| g / a),
            Op::Abs(x) => ew(*x, &|a, g| if a > 0.0 { g } else if a < 0.0 { -g } else { 0.0 }),
            Op::Square(x) => ew(*x, &|a, g| 2.0 * a * g),
            Op::Sqrt(x) => ew_out(*x, &|y, g| if y > 0.0 { g / (2.0 * y) } else { 0.0 }),
            Op::Clamp(x, lo, hi) => ew(*x, &|a, g| if a >= *lo && a <= *hi { g } else { 0.0 }),
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::Mean(x) => {
                let n = val(*x).len();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::SumAxis(x, axis) => {
                let xv = val(*x);
                let (outer, dim, inner) = split_axis(xv.shape(), *axis);
                let mut gx = vec![0.0; xv.len()];
                for o in 0..outer {
                    for k in 0..dim {
                        for i in 0..inner {
                            gx[(o * dim + k) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (batch, m, k, n) = matmul_dims(&av, &bv).expect("validated in forward");
                let mut r = Vec::new();
                if self.rg(*a) {
                    let mut ga = vec![0.0; av.len()];
                    for i in 0..batch {
                        gemm(m, n, k, 1.0, &g[i * m * n..], false, &bv.data()[i * k * n..], true, 0.0, &mut ga[i * m * k..]);
                    }
                    r.push((*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; bv.len()];
                    for i in 0..batch {
                        gemm(k, m, n, 1.0, &av.data()[i * m * k..], true, &g[i * m * n..], false, 0.0, &mut gb[i * k * n..]);
                    }
                    r.push((*b, gb));
                }
                r
            }
            Op::Conv2d { x, w, b, cfg } | Op::Deconv2d { x, w, b, cfg } => {
                let (xv, wv) = (val(*x), val(*w));
                let want = [self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b))];
                let grads = if matches!(op, Op::Conv2d { .. }) {
                    conv::conv2d_backward(&xv, &wv, b.is_some(), *cfg, g, want)
                } else {
                    conv::deconv2d_backward(&xv, &wv, b.is_some(), *cfg, g, want)
                };
                let mut r = Vec::new();
                if let Some(gx) = grads.input {
                    r.push((*x, gx));
                }
                if let Some(gw) = grads.weight {
                    r.push((*w, gw));
                }
                if let (Some(b), Some(gb)) = (b, grads.bias) {
                    r.push((*b, gb));
                }
                r
            }
            Op::Reshape(x) => vec![(*x, grad)],
            Op::Permute(x, perm) => {
                let gt = Tensor::from_parts(out.shape().to_vec(), grad);
                vec![(*x, shape::permute(&gt, &shape::inverse_perm(perm)).into_data())]
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                let mut r = Vec::new();
                let gt = Tensor::from_parts(out.shape().to_vec(), grad);
                for &p in parts {
                    let extent = val(p).shape()[*axis];
                    if self.rg(p) {
                        r.push((p, shape::narrow(&gt, *axis, offset, extent).expect("in range").into_data()));
                    }
                    offset += extent;
                }
                r
            }
            Op::Narrow { x, axis, start, len } => {
                vec![(*x, shape::narrow_backward(val(*x).shape(), *axis, *start, *len, g))]
            }
            Op::Resize { x, oh, ow } => vec![(*x, resample::resize_bilinear_backward(val(*x).shape(), *oh, *ow, g))],
            Op::AvgPool(x, k) => vec![(*x, resample::avg_pool_backward(val(*x).shape(), *k, g))],
            Op::Softmax(x, axis) => vec![(*x, special::softmax_backward(&out, *axis, g))],
            Op::RegionNorm(x, stats) => vec![(*x, special::region_norm_backward(&out, stats, g))],
            Op::PatchSim(x, state) => vec![(*x, special::patch_similarity_backward(val(*x).shape(), state, g))],
        }
    }
}

fn accumulate(node: &mut Node, g: Vec<f64>) {
    match node.grad.as_mut() {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => node.grad = Some(g),
    }
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (sa, sb) = (a.shape(), b.shape());
    match (sa.len(), sb.len()) {
        (2, 2) if sa[1] == sb[0] => Ok((1, sa[0], sa[1], sb[1])),
        (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => Ok((sa[0], sa[1], sa[2], sb[2])),
        (2, 2) => Err(Error::dim("matmul", Axis::Index(1), format!("{sa:?} x {sb:?}"))),
        (3, 3) if sa[0] != sb[0] => Err(Error::dim("matmul", Axis::Index(0), format!("batch {sa:?} x {sb:?}"))),
        (3, 3) => Err(Error::dim("matmul", Axis::Index(2), format!("{sa:?} x {sb:?}"))),
        _ => Err(Error::dim("matmul", Axis::Rank, format!("{sa:?} x {sb:?}"))),
    }
}

// Arithmetic returns `Result` because shapes may not broadcast, so the std
// operator traits don't fit.
#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.rg(self.id)
    }

    /// Constant copy of this node's value; gradients stop here.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }

    fn binop(self, other: Var<'g>, name: &'static str, f: fn(f64, f64) -> f64, op: fn(Id, Id) -> Op) -> Result<Var<'g>> {
        let v = binary(name, &self.value(), &other.value(), f)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(v, op(self.id, other.id), rg))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binop(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binop(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binop(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binop(other, "div", |a, b| a / b, Op::Div)
    }

    fn map(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'g> {
        let v = self.value().map(f);
        self.graph.unary(self.id, v, op)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.map(|x| x * c, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.map(|x| x + c, Op::Shift(self.id))
    }

    /// `c - self`.
    pub fn rsub_scalar(self, c: f64) -> Var<'g> {
        self.neg().add_scalar(c)
    }

    pub fn relu(self) -> Var<'g> {
        self.map(|x| if x < 0.0 { 0.0 } else { x }, Op::Relu(self.id))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        self.map(|x| if x > 0.0 { x } else { x * slope }, Op::LeakyRelu(self.id, slope))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.map(
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(self.id),
        )
    }

    pub fn tanh(self) -> Var<'g> {
        self.map(f64::tanh, Op::Tanh(self.id))
    }

    pub fn log(self) -> Var<'g> {
        self.map(f64::ln, Op::Log(self.id))
    }

    pub fn abs(self) -> Var<'g> {
        self.map(f64::abs, Op::Abs(self.id))
    }

    pub fn square(self) -> Var<'g> {
        self.map(|x| x * x, Op::Square(self.id))
    }

    pub fn sqrt(self) -> Var<'g> {
        self.map(f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        self.map(|x| x.clamp(lo, hi), Op::Clamp(self.id, lo, hi))
    }

    pub fn sum(self) -> Var<'g> {
        let v = Tensor::scalar(self.value().sum());
        self.graph.unary(self.id, v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g> {
        let x = self.value();
        let v = Tensor::scalar(x.sum() / x.len() as f64);
        self.graph.unary(self.id, v, Op::Mean(self.id))
    }

    /// ℓ1 norm: sum of absolute values.
    pub fn l1_norm(self) -> Var<'g> {
        self.abs().sum()
    }

    /// Sum over one axis, keeping it with extent 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::dim("sum_axis", Axis::Index(axis), format!("axis out of range for {:?}", x.shape())));
        }
        let (outer, dim, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..dim {
                for i in 0..inner {
                    out[o * inner + i] += x.data()[(o * dim + k) * inner + i];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        Ok(self.graph.unary(self.id, Tensor::from_parts(shape, out), Op::SumAxis(self.id, axis)))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'g>> {
        let n = self.value().shape().get(axis).copied().unwrap_or(1);
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f64))
    }

    /// `[m,k] x [k,n]`, or batched `[b,m,k] x [b,k,n]`.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let (batch, m, k, n) = matmul_dims(&a, &b)?;
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(m, k, n, 1.0, &a.data()[i * m * k..], false, &b.data()[i * k * n..], false, 0.0, &mut out[i * m * n..]);
        }
        let shape = if a.rank() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(Tensor::from_parts(shape, out), Op::MatMul(self.id, other.id), rg))
    }

    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, cfg: ConvCfg) -> Result<Var<'g>> {
        let bv = bias.map(|b| b.value());
        let v = conv::conv2d(&self.value(), &weight.value(), bv.as_deref(), cfg)?;
        let rg = self.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        let op = Op::Conv2d {
            x: self.id,
            w: weight.id,
            b: bias.map(|b| b.id),
            cfg,
        };
        Ok(self.graph.push(v, op, rg))
    }

    /// Transposed convolution; weight is `[in, out, kh, kw]`.
    pub fn deconv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, cfg: ConvCfg) -> Result<Var<'g>> {
        let bv = bias.map(|b| b.value());
        let v = conv::deconv2d(&self.value(), &weight.value(), bv.as_deref(), cfg)?;
        let rg = self.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        let op = Op::Deconv2d {
            x: self.id,
            w: weight.id,
            b: bias.map(|b| b.id),
            cfg,
        };
        Ok(self.graph.push(v, op, rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let v = self.value().reshape(shape)?;
        Ok(self.graph.unary(self.id, v, Op::Reshape(self.id)))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        shape::check_perm(perm, x.rank())?;
        let v = shape::permute(&x, perm);
        Ok(self.graph.unary(self.id, v, Op::Permute(self.id, perm.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'g>> {
        let r = self.value().rank();
        if r < 2 {
            return Err(Error::dim("transpose", Axis::Rank, "need rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let v = shape::narrow(&self.value(), axis, start, len)?;
        let op = Op::Narrow {
            x: self.id,
            axis,
            start,
            len,
        };
        Ok(self.graph.unary(self.id, v, op))
    }

    pub fn bilinear_upsample(self, factor: usize) -> Result<Var<'g>> {
        let s = self.shape();
        let r = s.len();
        if r < 2 || factor == 0 {
            return Err(Error::dim("bilinear_upsample", Axis::Rank, format!("shape {s:?}, factor {factor}")));
        }
        self.resize(s[r - 2] * factor, s[r - 1] * factor)
    }

    /// Bilinear resize of the last two axes.
    pub fn resize(self, oh: usize, ow: usize) -> Result<Var<'g>> {
        let v = resample::resize_bilinear(&self.value(), oh, ow)?;
        Ok(self.graph.unary(self.id, v, Op::Resize { x: self.id, oh, ow }))
    }

    pub fn avg_pool(self, k: usize) -> Result<Var<'g>> {
        let v = resample::avg_pool(&self.value(), k)?;
        Ok(self.graph.unary(self.id, v, Op::AvgPool(self.id, k)))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        let v = special::softmax(&self.value(), axis)?;
        Ok(self.graph.unary(self.id, v, Op::Softmax(self.id, axis)))
    }

    /// Independent standardization of masked / unmasked sites, see
    /// [`crate::inpaint::region_normalize`].
    pub fn region_norm(self, mask: &Tensor, eps: f64) -> Result<Var<'g>> {
        let (v, stats) = special::region_norm(&self.value(), mask, eps)?;
        Ok(self.graph.unary(self.id, v, Op::RegionNorm(self.id, stats)))
    }

    /// Mean 3x3-neighbourhood cosine similarity, `[n,c,h,w] -> [n,1,h,w]`.
    pub fn patch_similarity(self) -> Result<Var<'g>> {
        let (v, state) = special::patch_similarity(&self.value())?;
        Ok(self.graph.unary(self.id, v, Op::PatchSim(self.id, state)))
    }
}

/// Concatenates along `axis`.
pub fn concat<'g>(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
    let first = parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
    let v = shape::concat(&refs, axis)?;
    let rg = parts.iter().any(|p| p.requires_grad());
    Ok(first.graph.push(v, Op::Concat(parts.iter().map(|p| p.id).collect(), axis), rg))
}

//! Define-by-run computation graph.
//!
//! Every operation appends a node holding its forward value; node ids are a
//! topological order by construction, so the reverse pass simply walks the
//! node list backwards from the loss.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{contract, AdError, Result};
use crate::kernels::{self, BroadcastMap};
use crate::tensor::numel;
use crate::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Split { x: usize, axis: usize, start: usize },
    Softmax(usize),
    LayerNorm(usize),
    Gelu(usize),
    Tanh(usize),
    Exp(usize),
    Sin(usize),
    GatherRows(usize, Rc<[usize]>),
    ScatterRows(usize, Rc<[usize]>),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Concat(..) => "concat",
            Op::Split { .. } => "split",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm(_) => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Sin(_) => "sin",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows(..) => "scatter_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis(..) => "sum_axis",
        }
    }
}

struct Node<S> {
    op: Op,
    value: Tensor<S>,
    needs_grad: bool,
    /// Per-row reciprocal standard deviation for layer norm.
    saved: Vec<S>,
}

/// Append-only tape of tensor operations.
pub struct Graph<S> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the leaves of a graph.
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for `v`; leaves unreachable from the loss get zeros.
    pub fn get(&self, v: Var) -> Tensor<S> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::raw(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<S> {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::raw(shape, g),
            None => Tensor::zeros(shape),
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, op: Op, value: Tensor<S>, needs_grad: bool, saved: Vec<S>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            needs_grad,
            saved,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Differentiable leaf.
    pub fn leaf(&self, t: Tensor<S>) -> Var {
        self.push(Op::Leaf, t, true, Vec::new())
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, t: Tensor<S>) -> Var {
        self.push(Op::Leaf, t, false, Vec::new())
    }

    pub fn scalar_const(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(S::from_f64_lossy(v)))
    }

    pub fn value(&self, v: Var) -> Tensor<S> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value_ref(&self, v: Var) -> Ref<'_, Tensor<S>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> S {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes.borrow()[v.0].op.name()
    }

    // ---- elementwise with broadcasting ----

    fn binary(&self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        let out_shape = kernels::broadcast_shape(ta.shape(), tb.shape())?;
        let n = numel(&out_shape);
        let ma = BroadcastMap::new(&out_shape, ta.shape());
        let mb = BroadcastMap::new(&out_shape, tb.shape());
        let (da, db) = (ta.data(), tb.data());
        let mut out = Vec::with_capacity(n);
        match (&ma, &mb) {
            (BroadcastMap::Same, BroadcastMap::Same) => {
                if mul {
                    out.extend(da.iter().zip(db).map(|(&x, &y)| x * y));
                } else {
                    out.extend(da.iter().zip(db).map(|(&x, &y)| x + y));
                }
            }
            _ => {
                for i in 0..n {
                    let x = da[ma.idx(i)];
                    let y = db[mb.idx(i)];
                    out.push(if mul { x * y } else { x + y });
                }
            }
        }
        drop(nodes);
        let ng = self.needs(&[a.0, b.0]);
        let op = if mul { Op::Mul(a.0, b.0) } else { Op::Add(a.0, b.0) };
        Ok(self.push(op, Tensor::raw(out_shape, out), ng, Vec::new()))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    /// `a * c` for a constant `c`.
    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let k = self.scalar_const(c);
        self.mul(a, k)
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        let k = self.scalar_const(c);
        self.add(a, k)
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    fn unary(&self, x: Var, op: Op, f: impl Fn(S) -> S) -> Var {
        let nodes = self.nodes.borrow();
        let t = &nodes[x.0].value;
        let out = Tensor::raw(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        let ng = nodes[x.0].needs_grad;
        drop(nodes);
        self.push(op, out, ng, Vec::new())
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x.0), |v| v.tanh())
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Op::Exp(x.0), |v| v.exp())
    }

    pub fn sin(&self, x: Var) -> Var {
        self.unary(x, Op::Sin(x.0), |v| v.sin())
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x.0), kernels::gelu)
    }

    // ---- linear algebra / shape ----

    /// `[.., m, k] x [k, n]` (weight shared across leading dims) or
    /// `[b.., m, k] x [b.., k, n]` (matching leading dims).
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return contract(format!("matmul needs rank >= 2, got {sa:?} x {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return contract(format!("matmul inner dims differ: {sa:?} x {sb:?}"));
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let out = if sb.len() == 2 {
            let rows = ta.len() / k;
            let mut c = vec![S::zero(); rows * n];
            kernels::mm_nn(rows, k, n, ta.data(), tb.data(), &mut c);
            c
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return contract(format!("matmul batch dims differ: {sa:?} x {sb:?}"));
            }
            let batch = numel(&sa[..sa.len() - 2]);
            let mut c = vec![S::zero(); batch * m * n];
            for bi in 0..batch {
                kernels::mm_nn(
                    m,
                    k,
                    n,
                    &ta.data()[bi * m * k..(bi + 1) * m * k],
                    &tb.data()[bi * k * n..(bi + 1) * k * n],
                    &mut c[bi * m * n..(bi + 1) * m * n],
                );
            }
            c
        };
        drop(nodes);
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(Op::MatMul(a.0, b.0), Tensor::raw(out_shape, out), ng, Vec::new()))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let t = &nodes[x.0].value;
        let s = t.shape();
        if s.len() < 2 {
            return contract(format!("transpose needs rank >= 2, got {s:?}"));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let mut out_shape = s.to_vec();
        let l = out_shape.len();
        out_shape.swap(l - 2, l - 1);
        let out = kernels::transpose_last2(t.data(), r, c);
        let ng = nodes[x.0].needs_grad;
        drop(nodes);
        Ok(self.push(Op::Transpose(x.0), Tensor::raw(out_shape, out), ng, Vec::new()))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let t = nodes[x.0].value.clone().reshaped(shape.to_vec())?;
        let ng = nodes[x.0].needs_grad;
        drop(nodes);
        Ok(self.push(Op::Reshape(x.0), t, ng, Vec::new()))
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return contract("concat of zero tensors");
        }
        let nodes = self.nodes.borrow();
        let first = nodes[xs[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return contract(format!("concat axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for v in xs {
            let s = nodes[v.0].value.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return contract(format!("concat shape mismatch {first:?} vs {s:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for v in xs {
                let t = &nodes[v.0].value;
                let w = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        drop(nodes);
        let ng = self.needs(&ids);
        Ok(self.push(Op::Concat(ids, axis), Tensor::raw(out_shape, out), ng, Vec::new()))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn split(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let t = &nodes[x.0].value;
        let s = t.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return contract(format!("split [{start}, {}) of axis {axis} invalid for {s:?}", start + len));
        }
        let (outer, d, inner) = axis_split(s, axis);
        let mut out_shape = s.to_vec();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * d * inner + start * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let ng = nodes[x.0].needs_grad;
        drop(nodes);
        Ok(self.push(Op::Split { x: x.0, axis, start }, Tensor::raw(out_shape, out), ng, Vec::new()))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Var {
        let nodes = self.nodes.borrow();
        let t = &nodes[x.0].value;
        let w = *t.shape().last().unwrap_or(&1);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(w) {
            kernels::softmax_in_place(row);
        }
        let out = Tensor::raw(t.shape().to_vec(), out);
        let ng = nodes[x.0].needs_grad;
        drop(nodes);
        self.push(Op::Softmax(x.0), out, ng, Vec::new())
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, x: Var) -> Var {
        let nodes = self.nodes.borrow();
        let t = &nodes[x.0].value;
        let w = *t.shape().last().unwrap_or(&1);
        let eps = S::from_f64_lossy(LN_EPS);
        let wn = S::from_usize(w).unwrap();
        let mut out = Vec::with_capacity(t.len());
        let mut rstd = Vec::with_capacity(t.len() / w);
        for row in t.data().chunks(w) {
            let mean = row.iter().copied().sum::<S>() / wn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / wn;
            let r = S::one() / (var + eps).sqrt();
            rstd.push(r);
            out.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let out = Tensor::raw(t.shape().to_vec(), out);
        let ng = nodes[x.0].needs_grad;
        drop(nodes);
        self.push(Op::LayerNorm(x.0), out, ng, rstd)
    }

    /// Selects rows (first axis) by index; indices may repeat.
    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let t = &nodes[x.0].value;
        let s = t.shape();
        if s.is_empty() || idx.is_empty() {
            return contract("gather_rows needs rank >= 1 and at least one index");
        }
        let rows = s[0];
        let w = t.len() / rows;
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= rows {
                return contract(format!("gather index {i} out of range {rows}"));
            }
            out.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
        }
        let mut out_shape = s.to_vec();
        out_shape[0] = idx.len();
        let ng = nodes[x.0].needs_grad;
        drop(nodes);
        Ok(self.push(Op::GatherRows(x.0, idx.into()), Tensor::raw(out_shape, out), ng, Vec::new()))
    }

    /// Inverse of [`Graph::gather_rows`]: row `i` of `x` is added into row
    /// `idx[i]` of a zero tensor with `rows` rows.
    pub fn scatter_rows(&self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let t = &nodes[x.0].value;
        let s = t.shape();
        if s.is_empty() || s[0] != idx.len() {
            return contract(format!("scatter_rows: {} indices for shape {s:?}", idx.len()));
        }
        let w = t.len() / s[0];
        let mut out = vec![S::zero(); rows * w];
        for (r, &i) in idx.iter().enumerate() {
            if i >= rows {
                return contract(format!("scatter index {i} out of range {rows}"));
            }
            for (o, &v) in out[i * w..(i + 1) * w].iter_mut().zip(&t.data()[r * w..(r + 1) * w]) {
                *o += v;
            }
        }
        let mut out_shape = s.to_vec();
        out_shape[0] = rows;
        let ng = nodes[x.0].needs_grad;
        drop(nodes);
        Ok(self.push(Op::ScatterRows(x.0, idx.into()), Tensor::raw(out_shape, out), ng, Vec::new()))
    }

    pub fn sum(&self, x: Var) -> Var {
        let nodes = self.nodes.borrow();
        let s: S = nodes[x.0].value.data().iter().copied().sum();
        let ng = nodes[x.0].needs_grad;
        drop(nodes);
        self.push(Op::Sum(x.0), Tensor::scalar(s), ng, Vec::new())
    }

    pub fn mean(&self, x: Var) -> Var {
        let nodes = self.nodes.borrow();
        let t = &nodes[x.0].value;
        let s: S = t.data().iter().copied().sum::<S>() / S::from_usize(t.len()).unwrap();
        let ng = nodes[x.0].needs_grad;
        drop(nodes);
        self.push(Op::Mean(x.0), Tensor::scalar(s), ng, Vec::new())
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let t = &nodes[x.0].value;
        let s = t.shape();
        if axis >= s.len() {
            return contract(format!("sum_axis {axis} out of range for {s:?}"));
        }
        let (outer, d, inner) = axis_split(s, axis);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..d {
                let src = &t.data()[(o * d + j) * inner..(o * d + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = s.to_vec();
        out_shape.remove(axis);
        let ng = nodes[x.0].needs_grad;
        drop(nodes);
        Ok(self.push(Op::SumAxis(x.0, axis), Tensor::raw(out_shape, out), ng, Vec::new()))
    }

    /// Mean squared difference between `a` and `b` over all entries.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        Ok(self.mean(sq))
    }

    fn first_non_finite(&self, upto: usize) -> Option<usize> {
        let nodes = self.nodes.borrow();
        nodes[..=upto].iter().position(|n| !n.value.is_finite())
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            ));
        }
        if !nodes[loss.0].value.item().is_finite() {
            drop(nodes);
            let node = self.first_non_finite(loss.0).unwrap_or(loss.0);
            return Err(AdError::NonFinite { node });
        }
        let count = nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = vec![None; count];
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, i, &g, &mut grads);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn acc<S: Scalar>(grads: &mut [Option<Vec<S>>], nodes: &[Node<S>], id: usize, f: impl FnOnce(&mut [S])) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![S::zero(); nodes[id].value.len()]);
    f(slot);
}

fn backprop_node<S: Scalar>(nodes: &[Node<S>], i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &x in [*a, *b].iter() {
                let m = BroadcastMap::new(out.shape(), nodes[x].value.shape());
                acc(grads, nodes, x, |ga| match m {
                    BroadcastMap::Same => ga.iter_mut().zip(g).for_each(|(o, &v)| *o += v),
                    _ => g.iter().enumerate().for_each(|(k, &v)| ga[m.idx(k)] += v),
                });
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
            let ma = BroadcastMap::new(out.shape(), ta.shape());
            let mb = BroadcastMap::new(out.shape(), tb.shape());
            acc(grads, nodes, *a, |ga| {
                for (k, &v) in g.iter().enumerate() {
                    ga[ma.idx(k)] += v * tb.data()[mb.idx(k)];
                }
            });
            acc(grads, nodes, *b, |gb| {
                for (k, &v) in g.iter().enumerate() {
                    gb[mb.idx(k)] += v * ta.data()[ma.idx(k)];
                }
            });
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
            let (sa, sb) = (ta.shape(), tb.shape());
            let k = sa[sa.len() - 1];
            let n = sb[sb.len() - 1];
            if sb.len() == 2 {
                let rows = ta.len() / k;
                acc(grads, nodes, *a, |ga| kernels::mm_nt(rows, n, k, g, tb.data(), ga));
                acc(grads, nodes, *b, |gb| kernels::mm_tn(rows, k, n, ta.data(), g, gb));
            } else {
                let m = sa[sa.len() - 2];
                let batch = ta.len() / (m * k);
                acc(grads, nodes, *a, |ga| {
                    for bi in 0..batch {
                        kernels::mm_nt(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            &tb.data()[bi * k * n..(bi + 1) * k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                });
                acc(grads, nodes, *b, |gb| {
                    for bi in 0..batch {
                        kernels::mm_tn(
                            m,
                            k,
                            n,
                            &ta.data()[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                });
            }
        }
        Op::Transpose(x) => {
            let s = out.shape();
            let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
            let back = kernels::transpose_last2(g, r, c);
            acc(grads, nodes, *x, |gx| gx.iter_mut().zip(&back).for_each(|(o, &v)| *o += v));
        }
        Op::Reshape(x) => {
            acc(grads, nodes, *x, |gx| gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v));
        }
        Op::Concat(ids, axis) => {
            let (outer, _, inner) = axis_split(out.shape(), *axis);
            let total = out.shape()[*axis] * inner;
            let mut offset = 0;
            for &x in ids {
                let w = nodes[x].value.shape()[*axis] * inner;
                acc(grads, nodes, x, |gx| {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + w];
                        gx[o * w..(o + 1) * w].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                });
                offset += w;
            }
        }
        Op::Split { x, axis, start } => {
            let xs = nodes[*x].value.shape();
            let (outer, d, inner) = axis_split(xs, *axis);
            let len = out.shape()[*axis];
            acc(grads, nodes, *x, |gx| {
                for o in 0..outer {
                    let base = o * d * inner + start * inner;
                    gx[base..base + len * inner]
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                        .for_each(|(t, &v)| *t += v);
                }
            });
        }
        Op::Softmax(x) => {
            let w = *out.shape().last().unwrap_or(&1);
            acc(grads, nodes, *x, |gx| {
                for ((gr, yr), dst) in g.chunks(w).zip(out.data().chunks(w)).zip(gx.chunks_mut(w)) {
                    let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((d, &gy), &y) in dst.iter_mut().zip(gr).zip(yr) {
                        *d += y * (gy - dot);
                    }
                }
            });
        }
        Op::LayerNorm(x) => {
            let w = *out.shape().last().unwrap_or(&1);
            let wn = S::from_usize(w).unwrap();
            let rstd = &nodes[i].saved;
            acc(grads, nodes, *x, |gx| {
                for (r, ((gr, yr), dst)) in g
                    .chunks(w)
                    .zip(out.data().chunks(w))
                    .zip(gx.chunks_mut(w))
                    .enumerate()
                {
                    let mg = gr.iter().copied().sum::<S>() / wn;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<S>() / wn;
                    for ((d, &gy), &y) in dst.iter_mut().zip(gr).zip(yr) {
                        *d += rstd[r] * (gy - mg - y * mgy);
                    }
                }
            });
        }
        Op::Gelu(x) => {
            let xv = &nodes[*x].value;
            acc(grads, nodes, *x, |gx| {
                for ((d, &gy), &v) in gx.iter_mut().zip(g).zip(xv.data()) {
                    *d += gy * kernels::gelu_grad(v);
                }
            });
        }
        Op::Tanh(x) => acc(grads, nodes, *x, |gx| {
            for ((d, &gy), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                *d += gy * (S::one() - y * y);
            }
        }),
        Op::Exp(x) => acc(grads, nodes, *x, |gx| {
            for ((d, &gy), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                *d += gy * y;
            }
        }),
        Op::Sin(x) => {
            let xv = &nodes[*x].value;
            acc(grads, nodes, *x, |gx| {
                for ((d, &gy), &v) in gx.iter_mut().zip(g).zip(xv.data()) {
                    *d += gy * v.cos();
                }
            });
        }
        Op::GatherRows(x, idx) => {
            let w = out.len() / idx.len();
            acc(grads, nodes, *x, |gx| {
                for (r, &row) in idx.iter().enumerate() {
                    gx[row * w..(row + 1) * w]
                        .iter_mut()
                        .zip(&g[r * w..(r + 1) * w])
                        .for_each(|(d, &v)| *d += v);
                }
            });
        }
        Op::ScatterRows(x, idx) => {
            let w = nodes[*x].value.len() / idx.len();
            acc(grads, nodes, *x, |gx| {
                for (r, &row) in idx.iter().enumerate() {
                    gx[r * w..(r + 1) * w]
                        .iter_mut()
                        .zip(&g[row * w..(row + 1) * w])
                        .for_each(|(d, &v)| *d += v);
                }
            });
        }
        Op::Sum(x) => acc(grads, nodes, *x, |gx| gx.iter_mut().for_each(|d| *d += g[0])),
        Op::Mean(x) => {
            let n = S::from_usize(nodes[*x].value.len()).unwrap();
            acc(grads, nodes, *x, |gx| gx.iter_mut().for_each(|d| *d += g[0] / n));
        }
        Op::SumAxis(x, axis) => {
            let (outer, d, inner) = axis_split(nodes[*x].value.shape(), *axis);
            acc(grads, nodes, *x, |gx| {
                for o in 0..outer {
                    for j in 0..d {
                        gx[(o * d + j) * inner..(o * d + j + 1) * inner]
                            .iter_mut()
                            .zip(&g[o * inner..(o + 1) * inner])
                            .for_each(|(t, &v)| *t += v);
                    }
                }
            });
        }
    }
}

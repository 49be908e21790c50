//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every operation of one forward pass together with its
//! output value. [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients into every node that requires one. Every recorded value is
//! checked for NaN/Inf as it is produced, and the failing op is named in the
//! error.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{self, conv, dense, norm, resize, Conv2dArgs, HighPassMask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        args: Conv2dArgs,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
        transpose_rhs: bool,
    },
    Softmax(Var),
    Scale(Var, f64),
    Add(Var, Var),
    Mul(Var, Var),
    Silu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    BroadcastBatch(Var),
    Upsample2(Var),
    AvgPool2(Var),
    HighPass(Var, Arc<HighPassMask>),
    Standardize(Var, f64),
    /// `src[e]` is the point whose feature won the max for output element `e`.
    EdgeMax {
        x: Var,
        src: Vec<u32>,
    },
    Bce {
        p: Var,
        target: Tensor<T>,
        eps: f64,
    },
    Sum(Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut v = vec![x, w];
                v.extend(b);
                v
            }
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Softmax(x)
            | Op::Scale(x, _)
            | Op::Silu(x)
            | Op::Sigmoid(x)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::BroadcastBatch(x)
            | Op::Upsample2(x)
            | Op::AvgPool2(x)
            | Op::HighPass(x, _)
            | Op::Standardize(x, _)
            | Op::EdgeMax { x, .. }
            | Op::Bce { p: x, .. }
            | Op::Sum(x) => vec![x],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of one forward pass. Single-writer; build a fresh graph per step.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a node, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        let value = value.check_finite(name)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, args: Conv2dArgs) -> Result<Var> {
        let y = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), args)?;
        self.push("conv2d", y, Op::Conv2d { x, w, b, args })
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = dense::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        self.push("linear", y, Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var, transpose_rhs: bool) -> Result<Var> {
        let y = dense::matmul(self.value(a), self.value(b), transpose_rhs)?;
        self.push("matmul", y, Op::MatMul { a, b, transpose_rhs })
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let y = dense::softmax_lastaxis(self.value(x));
        self.push("softmax", y, Op::Softmax(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let y = self.value(x).scale(T::lit(factor));
        self.push("scale", y, Op::Scale(x, factor))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b)).map_err(|_| {
            Error::shape(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            )
        })?;
        self.push("add", y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q).map_err(|_| {
            Error::shape(
                "mul",
                format!("{:?} * {:?}", self.shape(a), self.shape(b)),
            )
        })?;
        self.push("mul", y, Op::Mul(a, b))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(ops::silu);
        self.push("silu", y, Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(ops::sigmoid);
        self.push("sigmoid", y, Op::Sigmoid(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        self.push("reshape", y, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let y = dense::permute(self.value(x), perm)?;
        self.push("permute", y, Op::Permute(x, perm.to_vec()))
    }

    /// Repeats `x` along a new leading axis of extent `n`.
    pub fn broadcast_batch(&mut self, x: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::invalid("broadcast_batch", "batch of zero"));
        }
        let src = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(src.shape());
        let mut data = Vec::with_capacity(n * src.numel());
        for _ in 0..n {
            data.extend_from_slice(src.data());
        }
        self.push(
            "broadcast_batch",
            Tensor::from_parts(shape, data),
            Op::BroadcastBatch(x),
        )
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let y = resize::upsample2(self.value(x))?;
        self.push("upsample2", y, Op::Upsample2(x))
    }

    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let y = resize::avgpool2(self.value(x))?;
        self.push("avgpool2", y, Op::AvgPool2(x))
    }

    pub fn high_pass(&mut self, x: Var, mask: Arc<HighPassMask>) -> Result<Var> {
        let y = ops::high_pass(self.value(x), &mask)?;
        self.push("high_pass", y, Op::HighPass(x, mask))
    }

    pub fn standardize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let y = norm::standardize(self.value(x), eps)?;
        self.push("standardize", y, Op::Standardize(x, eps))
    }

    /// Max-aggregated edge features over a fixed neighbour table.
    ///
    /// `x` is `[B,P,C]`; `neighbours[b]` holds `P*k` point indices (row-major
    /// `[P,k]`). Output `[B,P,C]` is `max_j (x[b, n_j, c] - x[b, i, c])`.
    /// The neighbour table is treated as constant.
    pub fn edge_max(&mut self, x: Var, neighbours: &[Vec<usize>], k: usize) -> Result<Var> {
        let src_t = self.value(x);
        let &[b, p, c] = src_t.shape() else {
            return Err(Error::shape(
                "edge_max",
                format!("expected [B,P,C], got {:?}", src_t.shape()),
            ));
        };
        if k == 0 || neighbours.len() != b || neighbours.iter().any(|n| n.len() != p * k) {
            return Err(Error::shape(
                "edge_max",
                format!("neighbour table does not match batch {b}, {p} points, k={k}"),
            ));
        }
        if neighbours.iter().flatten().any(|&j| j >= p) {
            return Err(Error::invalid("edge_max", "neighbour index out of range"));
        }
        let data = src_t.data();
        let mut out = Vec::with_capacity(b * p * c);
        let mut src = Vec::with_capacity(b * p * c);
        for (bi, table) in neighbours.iter().enumerate() {
            let base = bi * p * c;
            for i in 0..p {
                let row = &table[i * k..][..k];
                for ch in 0..c {
                    let centre = data[base + i * c + ch];
                    let mut best = row[0];
                    let mut best_v = data[base + best * c + ch];
                    for &j in &row[1..] {
                        let v = data[base + j * c + ch];
                        if v > best_v {
                            best = j;
                            best_v = v;
                        }
                    }
                    out.push(best_v - centre);
                    src.push(best as u32);
                }
            }
        }
        self.push(
            "edge_max",
            Tensor::from_parts(vec![b, p, c], out),
            Op::EdgeMax { x, src },
        )
    }

    /// Mean binary cross-entropy of probabilities `p` against a constant
    /// target, with `p` clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
        let probs = self.value(p);
        if probs.shape() != target.shape() {
            return Err(Error::shape(
                "bce",
                format!("probabilities {:?} vs target {:?}", probs.shape(), target.shape()),
            ));
        }
        let (lo, hi) = (T::lit(eps), T::one() - T::lit(eps));
        let total: T = probs
            .data()
            .iter()
            .zip(target.data())
            .map(|(&pv, &y)| {
                let q = pv.max(lo).min(hi);
                -(y * q.ln() + (T::one() - y) * (T::one() - q).ln())
            })
            .sum();
        let loss = total / T::lit(probs.numel() as f64);
        self.push(
            "bce",
            Tensor::scalar(loss),
            Op::Bce {
                p,
                target: target.clone(),
                eps,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push("sum", y, Op::Sum(x))
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Disconnected(format!("node {} is not on this tape", loss.0)))?;
        if node.value.numel() != 1 {
            return Err(Error::Disconnected(format!(
                "loss must be a scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Disconnected(
                "loss does not depend on any trainable leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(node.value.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gi) in self.local_grads(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, args } => {
                let gr = conv::conv2d_backward(val(x), val(w), g, args, self.needs(x))?;
                if let Some(gx) = gr.input {
                    out.push((x, gx));
                }
                out.push((w, gr.weight));
                if let Some(b) = b {
                    out.push((b, gr.bias));
                }
            }
            &Op::Linear { x, w, b } => {
                let gr = dense::linear_backward(val(x), val(w), g)?;
                out.push((x, gr.input));
                out.push((w, gr.weight));
                if let Some(b) = b {
                    out.push((b, gr.bias));
                }
            }
            &Op::MatMul {
                a,
                b,
                transpose_rhs,
            } => {
                let (ga, gb) = dense::matmul_backward(val(a), val(b), g, transpose_rhs)?;
                out.push((a, ga));
                out.push((b, gb));
            }
            &Op::Softmax(x) => out.push((x, dense::softmax_backward(&node.value, g))),
            &Op::Scale(x, f) => out.push((x, g.scale(T::lit(f)))),
            &Op::Add(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.clone()));
            }
            &Op::Mul(a, b) => {
                out.push((a, g.zip_map(val(b), |gv, bv| gv * bv)?));
                out.push((b, g.zip_map(val(a), |gv, av| gv * av)?));
            }
            &Op::Silu(x) => {
                let gx = g.zip_map(val(x), |gv, xv| {
                    let s = ops::sigmoid(xv);
                    gv * (s + xv * s * (T::one() - s))
                })?;
                out.push((x, gx));
            }
            &Op::Sigmoid(x) => {
                let gx = g.zip_map(&node.value, |gv, y| gv * y * (T::one() - y))?;
                out.push((x, gx));
            }
            &Op::Reshape(x) => out.push((x, g.reshape(val(x).shape())?)),
            Op::Permute(x, perm) => {
                out.push((*x, dense::permute(g, &dense::inverse_permutation(perm))?));
            }
            &Op::BroadcastBatch(x) => {
                let n = val(x).numel();
                let mut acc = vec![T::zero(); n];
                for chunk in g.data().chunks(n) {
                    for (a, &v) in acc.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                out.push((x, Tensor::from_parts(val(x).shape().to_vec(), acc)));
            }
            &Op::Upsample2(x) => out.push((x, resize::upsample2_backward(g)?)),
            &Op::AvgPool2(x) => out.push((x, resize::avgpool2_backward(g)?)),
            Op::HighPass(x, mask) => out.push((*x, ops::high_pass(g, mask)?)),
            &Op::Standardize(x, eps) => {
                out.push((x, norm::standardize_backward(val(x), g, eps)?));
            }
            Op::EdgeMax { x, src } => {
                let xs = val(*x).shape();
                let (p, c) = (xs[1], xs[2]);
                let mut gx = vec![T::zero(); val(*x).numel()];
                for (e, (&gv, &s)) in g.data().iter().zip(src).enumerate() {
                    let (bi, rem) = (e / (p * c), e % (p * c));
                    let ch = rem % c;
                    gx[e] -= gv;
                    gx[bi * p * c + s as usize * c + ch] += gv;
                }
                out.push((*x, Tensor::from_parts(xs.to_vec(), gx)));
            }
            Op::Bce { p, target, eps } => {
                let probs = val(*p);
                let (lo, hi) = (T::lit(*eps), T::one() - T::lit(*eps));
                let scale = g.item() / T::lit(probs.numel() as f64);
                let gx = probs.zip_map(target, |pv, y| {
                    if pv < lo || pv > hi {
                        T::zero()
                    } else {
                        scale * (pv - y) / (pv * (T::one() - pv))
                    }
                })?;
                out.push((*p, gx));
            }
            &Op::Sum(x) => out.push((x, Tensor::full(val(x).shape(), g.item()))),
        }
        Ok(out)
    }
}

//! Tape of tensor operations with reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and `backward` simply walks it in reverse.

use super::ops::{self, Activation, Direction, LayerNormCache, LstmCache};
use super::{ParamStore, Real, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Param(usize),
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    AddBias { x: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { x: NodeId, s: T },
    Act { x: NodeId, kind: Activation },
    ConcatCols { a: NodeId, b: NodeId },
    SliceCols { x: NodeId, lo: usize },
    Softmax { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, cache: LayerNormCache<T> },
    Lstm { x: NodeId, wx: NodeId, wh: NodeId, b: NodeId, dir: Direction, cache: LstmCache<T> },
    Bce { p: NodeId, y: Vec<T> },
}

struct Node<T> {
    // None for parameter leaves, whose value lives in the store.
    value: Option<Tensor<T>>,
    op: Op<T>,
}

/// Recorded forward computation. Parameters are borrowed from a
/// [`ParamStore`], never copied.
pub struct Graph<'p, T> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
}

/// Gradients from one backward pass: one tensor per store parameter (in
/// store order, zero when disconnected) plus adjoints of input leaves.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: Vec<Tensor<T>>,
    nodes: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Adjoint of an input leaf, `None` if the loss does not depend on it.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes.get(id.0).and_then(Option::as_ref)
    }

    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self { params: store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(), nodes: Vec::new() }
    }

    /// Adds `other` scaled by `s` into the parameter gradients.
    pub fn accumulate(&mut self, other: &Gradients<T>, s: T) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += s * y;
            }
        }
    }

    /// Drops the per-node adjoints, keeping only parameter gradients.
    pub fn into_params(self) -> Vec<Tensor<T>> {
        self.params
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Self { params: None, nodes: Vec::new() }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self { params: Some(params), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value: Some(value), op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(i)) => self.params.expect("param node without store").tensor(*i),
            _ => unreachable!("node without value"),
        }
    }

    /// Constant input. It receives no parameter gradient, but its adjoint is
    /// available through [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let store = self.params.ok_or_else(|| Error::State("graph has no parameter store".into()))?;
        let idx = store.index_of(name).ok_or_else(|| Error::InvalidConfig(format!("unknown parameter {name:?}")))?;
        self.nodes.push(Node { value: None, op: Op::Param(idx) });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> Result<NodeId> {
        let v = ops::matmul(self.value(a), ta, self.value(b), tb)?;
        Ok(self.push(v, Op::MatMul { a, b, ta, tb }))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let mut v = self.value(x).clone();
        ops::add_bias_inplace(&mut v, self.value(b))?;
        Ok(self.push(v, Op::AddBias { x, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(format!("add {:?} + {:?}", va.shape(), vb.shape())));
        }
        let mut v = va.clone();
        v.add_assign(vb);
        Ok(self.push(v, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> NodeId {
        let v = self.value(x).map(|e| e * s);
        self.push(v, Op::Scale { x, s })
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        if kind == Activation::Identity {
            return x;
        }
        let v = self.value(x).map(|e| kind.apply(e));
        self.push(v, Op::Act { x, kind })
    }

    /// `act(x · w + b)`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId, act: Activation) -> Result<NodeId> {
        let z = self.matmul(x, w)?;
        let z = self.add_bias(z, b)?;
        Ok(self.activation(z, act))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(shape_err(format!("concat rows {} vs {}", va.rows(), vb.rows())));
        }
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        for r in 0..va.rows() {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let v = Tensor::matrix(va.rows(), va.cols() + vb.cols(), data)?;
        Ok(self.push(v, Op::ConcatCols { a, b }))
    }

    /// Columns `lo..hi`.
    pub fn slice_cols(&mut self, x: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if lo >= hi || hi > vx.cols() {
            return Err(shape_err(format!("slice {lo}..{hi} of {} columns", vx.cols())));
        }
        let mut data = Vec::with_capacity(vx.rows() * (hi - lo));
        for r in 0..vx.rows() {
            data.extend_from_slice(&vx.row(r)[lo..hi]);
        }
        let v = Tensor::matrix(vx.rows(), hi - lo, data)?;
        Ok(self.push(v, Op::SliceCols { x, lo }))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = ops::softmax_rows(self.value(x));
        self.push(v, Op::Softmax { x })
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (v, cache) = ops::layer_norm_cached(self.value(x), self.value(gamma), self.value(beta))?;
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, cache }))
    }

    pub fn lstm(&mut self, x: NodeId, wx: NodeId, wh: NodeId, b: NodeId, dir: Direction) -> Result<NodeId> {
        let (v, cache) = ops::lstm_forward_cached(self.value(x), self.value(wx), self.value(wh), self.value(b), dir)?;
        Ok(self.push(v, Op::Lstm { x, wx, wh, b, dir, cache }))
    }

    /// Multi-head attention. `w` holds `[wq, bq, wk, bk, wv, bv, wo, bo]`.
    pub fn multihead_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        w: [NodeId; 8],
        n_heads: usize,
    ) -> Result<NodeId> {
        let d = self.value(w[0]).cols();
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(Error::InvalidConfig(format!("model width {d} not divisible by {n_heads} heads")));
        }
        let dh = d / n_heads;
        let qp = self.dense(q, w[0], w[1], Activation::Identity)?;
        let kp = self.dense(k, w[2], w[3], Activation::Identity)?;
        let vp = self.dense(v, w[4], w[5], Activation::Identity)?;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut merged: Option<NodeId> = None;
        for h in 0..n_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = self.slice_cols(qp, lo, hi)?;
            let kh = self.slice_cols(kp, lo, hi)?;
            let vh = self.slice_cols(vp, lo, hi)?;
            let logits = self.matmul_t(qh, false, kh, true)?;
            let logits = self.scale(logits, scale);
            let attn = self.softmax_rows(logits);
            let head = self.matmul(attn, vh)?;
            merged = Some(match merged {
                None => head,
                Some(m) => self.concat_cols(m, head)?,
            });
        }
        let merged = merged.expect("at least one head");
        self.dense(merged, w[6], w[7], Activation::Identity)
    }

    /// Mean BCE of probabilities `p` (T×1 or T) against 0/1 labels.
    pub fn bce(&mut self, p: NodeId, labels: &[T]) -> Result<NodeId> {
        let loss = ops::bce_loss(self.value(p).data(), labels)?;
        Ok(self.push(Tensor::vector(vec![loss]), Op::Bce { p, y: labels.to_vec() }))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before the loss was recorded".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, node has shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        let mut param_grads: Vec<Tensor<T>> = match self.params {
            Some(store) => store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            None => Vec::new(),
        };

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => grads[idx] = Some(g),
                Op::Param(i) => param_grads[*i].add_assign(&g),
                Op::MatMul { a, b, ta, tb } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    // C = op(A) op(B): dA via dC op(B)ᵀ, dB via op(A)ᵀ dC
                    let da = if *ta { ops::matmul(vb, *tb, &g, true)? } else { ops::matmul(&g, false, vb, !*tb)? };
                    let db = if *tb { ops::matmul(&g, true, va, *ta)? } else { ops::matmul(va, !*ta, &g, false)? };
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddBias { x, b } => {
                    let db = ops::column_sums(&g);
                    let db = Tensor::new(self.value(*b).shape().to_vec(), db.into_data())?;
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *x, g);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Scale { x, s } => accumulate(&mut grads, *x, g.map(|e| e * *s)),
                Op::Act { x, kind } => {
                    let (vx, vy) = (self.value(*x), self.value(NodeId(idx)));
                    let mut dx = g;
                    for ((d, &xv), &yv) in dx.data_mut().iter_mut().zip(vx.data()).zip(vy.data()) {
                        *d *= kind.derivative(xv, yv);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols { a, b } => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let mut da = Vec::with_capacity(g.rows() * ca);
                    let mut db = Vec::with_capacity(g.rows() * cb);
                    for r in 0..g.rows() {
                        let row = g.row(r);
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(g.rows(), ca, da)?);
                    accumulate(&mut grads, *b, Tensor::matrix(g.rows(), cb, db)?);
                }
                Op::SliceCols { x, lo } => {
                    let vx = self.value(*x);
                    let mut dx = Tensor::zeros(vx.shape());
                    let w = g.cols();
                    for r in 0..g.rows() {
                        dx.row_mut(r)[*lo..*lo + w].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Softmax { x } => {
                    let dx = ops::softmax_rows_backward(self.value(NodeId(idx)), &g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm { x, gamma, beta, cache } => {
                    let (dx, dgamma, dbeta) = ops::layer_norm_backward(cache, self.value(*gamma), &g);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, reshape_as(dgamma, self.value(*gamma))?);
                    accumulate(&mut grads, *beta, reshape_as(dbeta, self.value(*beta))?);
                }
                Op::Lstm { x, wx, wh, b, dir, cache } => {
                    let lg = ops::lstm_backward(
                        self.value(*x),
                        self.value(*wx),
                        self.value(*wh),
                        self.value(NodeId(idx)),
                        cache,
                        &g,
                        *dir,
                    )?;
                    accumulate(&mut grads, *x, lg.dx);
                    accumulate(&mut grads, *wx, lg.dwx);
                    accumulate(&mut grads, *wh, lg.dwh);
                    accumulate(&mut grads, *b, reshape_as(lg.db, self.value(*b))?);
                }
                Op::Bce { p, y } => {
                    let vp = self.value(*p);
                    let mut dp = ops::bce_grad(vp.data(), y);
                    let s = g.data()[0];
                    for v in &mut dp {
                        *v *= s;
                    }
                    accumulate(&mut grads, *p, Tensor::new(vp.shape().to_vec(), dp)?);
                }
            }
        }
        Ok(Gradients { params: param_grads, nodes: grads })
    }
}

fn reshape_as<T: Real>(t: Tensor<T>, like: &Tensor<T>) -> Result<Tensor<T>> {
    Tensor::new(like.shape().to_vec(), t.into_data())
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

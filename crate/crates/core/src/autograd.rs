//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records one forward pass. Trainable values live in a
//! [`ParamStore`]; they enter a tape through [`Tape::param`] and their
//! gradients come back out through [`Tape::grads_for`]. Values inserted with
//! [`Tape::constant`] never receive gradients, which is how frozen networks
//! and detached representations are expressed.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::tensor::Tensor;

static NEXT_STORE_TAG: AtomicU32 = AtomicU32::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named collection of trainable tensors.
#[derive(Debug)]
pub struct ParamStore {
    tag: u32,
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    /// A clone is a new, independent store: gradients recorded against the
    /// original are never routed to the copy.
    fn clone(&self) -> Self {
        Self { tag: NEXT_STORE_TAG.fetch_add(1, Ordering::Relaxed), names: self.names.clone(), values: self.values.clone() }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { tag: NEXT_STORE_TAG.fetch_add(1, Ordering::Relaxed), names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Bitwise equality of names and values.
    pub fn bit_identical(&self, other: &Self) -> bool {
        self.names == other.names
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| {
                a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    fn tag(&self) -> u32 {
        self.tag
    }
}

/// Gradients for every parameter of one store. Parameters that did not take
/// part in the loss hold zeros.
#[derive(Debug, Clone)]
pub struct Grads {
    values: Vec<Tensor>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { values: store.values.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn sq_norm(&self) -> f64 {
        self.values.iter().map(Tensor::sq_norm).sum()
    }

    pub fn scale_in_place(&mut self, k: f64) {
        for t in &mut self.values {
            for v in t.data_mut() {
                *v *= k;
            }
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.iter().all(|t| t.data().iter().all(|&v| v == 0.0))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.values.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }
}

/// Rescales all gradient groups together so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(groups: &mut [&mut Grads], max_norm: f64) -> f64 {
    let norm = groups.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for g in groups.iter_mut() {
            g.scale_in_place(k);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Hcat(Vec<Var>),
    Vcat(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Unfold { x: Var, seq_len: usize, kernel: usize },
    Attention { q: Var, k: Var, v: Var, seq_len: usize, heads: usize, probs: Vec<Tensor> },
    LayerNorm { x: Var, xhat: Tensor, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    RowNorm(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<(u32, ParamId), Var>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a 1x1 node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Leaf for a trainable parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.tag(), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(key, v);
        v
    }

    /// The parameter's current value as a constant: no gradient flows back.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.get(id).clone())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `a + row` where `row` is `[1, cols]`, broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row expects a row vector");
        assert_eq!(av.cols(), rv.cols(), "add_row column mismatch");
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// `a * row` elementwise, with `row` broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "mul_row expects a row vector");
        assert_eq!(av.cols(), rv.cols(), "mul_row column mismatch");
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, g) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *x *= g;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x + k);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// `k - a`.
    pub fn rsub_scalar(&mut self, k: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, k)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// `log(1 + e^x)`, stable for large `|x|`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let rg = self.rg(a);
        self.push(value, Op::Softplus(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Log(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(value, Op::Square(a), rg)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    pub fn hcat(&mut self, parts: &[Var]) -> Var {
        let value = {
            let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::hcat(&refs)
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::Hcat(parts.to_vec()), rg)
    }

    pub fn vcat(&mut self, parts: &[Var]) -> Var {
        let value = {
            let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::vcat(&refs)
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::Vcat(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice_cols(start, end);
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).gather_rows(idx);
        let rg = self.rg(a);
        self.push(value, Op::GatherRows(a, idx.to_vec()), rg)
    }

    /// Temporal im2col with zero "same" padding. `x` is `[batch * seq_len, c]`
    /// and the result is `[batch * seq_len, kernel * c]`, where column block
    /// `j` holds the frame at offset `j - kernel / 2` within the same sequence.
    pub fn unfold_time(&mut self, x: Var, seq_len: usize, kernel: usize) -> Var {
        let value = unfold_forward(self.value(x), seq_len, kernel);
        let rg = self.rg(x);
        self.push(value, Op::Unfold { x, seq_len, kernel }, rg)
    }

    /// Scaled dot-product attention applied independently to each sequence of
    /// `seq_len` rows and each of `heads` column groups.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Var {
        let (value, probs) = attention_forward(self.value(q), self.value(k), self.value(v), seq_len, heads);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(value, Op::Attention { q, k, v, seq_len, heads, probs }, rg)
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.cols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xhat.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(x);
        self.push(xhat.clone(), Op::LayerNorm { x, xhat, inv_std }, rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    /// Sum across columns: `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        let value = Tensor::from_vec(av.rows(), 1, data);
        let rg = self.rg(a);
        self.push(value, Op::SumCols(a), rg)
    }

    /// Euclidean norm of each row: `[r, c] -> [r, 1]`. The gradient at a zero
    /// row is taken to be zero.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let value = Tensor::from_vec(av.rows(), 1, data);
        let rg = self.rg(a);
        self.push(value, Op::RowNorm(a), rg)
    }

    /// Sum of scalar nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut iter = terms.iter();
        let first = *iter.next().expect("add_all needs at least one term");
        iter.fold(first, |acc, &t| self.add(acc, t))
    }

    /// Backpropagates from the scalar `loss`. Gradients are then available
    /// through [`Tape::grad`] and [`Tape::grads_for`].
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    /// Gradient of the last backward pass with respect to `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Collects gradients for every parameter of `store`.
    pub fn grads_for(&self, store: &ParamStore) -> Grads {
        let mut out = Grads::zeros_like(store);
        for (&(tag, id), &var) in &self.params {
            if tag != store.tag() {
                continue;
            }
            if let Some(g) = self.grad(var) {
                out.values[id.0].add_assign(g);
            }
        }
        out
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Tensor>], v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                if self.rg(*row) {
                    acc(grads, *row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row);
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        for (x, s) in ga.row_mut(r).iter_mut().zip(rv.data()) {
                            *x *= s;
                        }
                    }
                    acc(grads, *a, ga);
                }
                if self.rg(*row) {
                    acc(grads, *row, column_sums(&g.zip_map(self.value(*a), |x, y| x * y)));
                }
            }
            Op::Scale(a, k) => acc(grads, *a, g.scale(*k)),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::Relu(a) => acc(grads, *a, g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })),
            Op::Sigmoid(a) => acc(grads, *a, g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))),
            Op::Softplus(a) => acc(grads, *a, g.zip_map(self.value(*a), |gv, x| gv * sigmoid(x))),
            Op::Log(a) => acc(grads, *a, g.zip_map(self.value(*a), |gv, x| gv / x)),
            Op::Square(a) => acc(grads, *a, g.zip_map(self.value(*a), |gv, x| 2.0 * gv * x)),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(grads, *a, g.zip_map(self.value(*a), |gv, x| if x >= lo && x <= hi { gv } else { 0.0 }))
            }
            Op::Hcat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.rg(p) {
                        acc(grads, p, g.slice_cols(off, off + c));
                    }
                    off += c;
                }
            }
            Op::Vcat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.rg(p) {
                        acc(grads, p, g.slice_rows(off, off + r));
                    }
                    off += r;
                }
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for (o, &src) in idx.iter().enumerate() {
                    for (d, s) in ga.row_mut(src).iter_mut().zip(g.row(o)) {
                        *d += s;
                    }
                }
                acc(grads, *a, ga);
            }
            Op::Unfold { x, seq_len, kernel } => {
                let xv = self.value(*x);
                acc(grads, *x, unfold_backward(g, xv.rows(), xv.cols(), *seq_len, *kernel));
            }
            Op::Attention { q, k, v, seq_len, heads, probs } => {
                let (gq, gk, gv) =
                    attention_backward(g, self.value(*q), self.value(*k), self.value(*v), *seq_len, *heads, probs);
                acc(grads, *q, gq);
                acc(grads, *k, gk);
                acc(grads, *v, gv);
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let n = xhat.cols() as f64;
                let mut gx = Tensor::zeros(xhat.rows(), xhat.cols());
                for r in 0..xhat.rows() {
                    let (gr, hr) = (g.row(r), xhat.row(r));
                    let sum_g: f64 = gr.iter().sum();
                    let sum_gh: f64 = gr.iter().zip(hr).map(|(a, b)| a * b).sum();
                    let inv = inv_std[r];
                    for ((o, &gi), &hi) in gx.row_mut(r).iter_mut().zip(gr).zip(hr) {
                        *o = inv / n * (n * gi - sum_g - hi * sum_gh);
                    }
                }
                acc(grads, *x, gx);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for ((o, &gi), &yi) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yi * (gi - dot);
                    }
                }
                acc(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let sum_g: f64 = g.row(r).iter().sum();
                    for ((o, &gi), &yi) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = gi - yi.exp() * sum_g;
                    }
                }
                acc(grads, *a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                acc(grads, *a, Tensor::full(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                acc(grads, *a, Tensor::full(r, c, g.item() / (r * c) as f64));
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i).fill(g.get(i, 0));
                }
                acc(grads, *a, ga);
            }
            Op::RowNorm(a) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let n = node.value.get(r, 0);
                    if n > 0.0 {
                        let k = g.get(r, 0) / n;
                        for (o, &x) in ga.row_mut(r).iter_mut().zip(av.row(r)) {
                            *o = k * x;
                        }
                    }
                }
                acc(grads, *a, ga);
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` as `max(x, 0) + log1p(e^{-|x|})`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

fn unfold_forward(x: &Tensor, seq_len: usize, kernel: usize) -> Tensor {
    let (rows, c) = x.shape();
    assert!(seq_len > 0 && rows % seq_len == 0, "rows {rows} not a multiple of seq_len {seq_len}");
    let pad = kernel / 2;
    let mut out = Tensor::zeros(rows, kernel * c);
    for b in 0..rows / seq_len {
        for t in 0..seq_len {
            let dst = out.row_mut(b * seq_len + t);
            for j in 0..kernel {
                let src_t = t as isize + j as isize - pad as isize;
                if src_t < 0 || src_t >= seq_len as isize {
                    continue;
                }
                dst[j * c..(j + 1) * c].copy_from_slice(x.row(b * seq_len + src_t as usize));
            }
        }
    }
    out
}

fn unfold_backward(g: &Tensor, rows: usize, c: usize, seq_len: usize, kernel: usize) -> Tensor {
    let pad = kernel / 2;
    let mut gx = Tensor::zeros(rows, c);
    for b in 0..rows / seq_len {
        for t in 0..seq_len {
            let src = g.row(b * seq_len + t);
            for j in 0..kernel {
                let src_t = t as isize + j as isize - pad as isize;
                if src_t < 0 || src_t >= seq_len as isize {
                    continue;
                }
                let dst = gx.row_mut(b * seq_len + src_t as usize);
                for (d, s) in dst.iter_mut().zip(&src[j * c..(j + 1) * c]) {
                    *d += s;
                }
            }
        }
    }
    gx
}

fn block(t: &Tensor, r0: usize, rows: usize, c0: usize, cols: usize) -> Tensor {
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..rows {
        out.row_mut(r).copy_from_slice(&t.row(r0 + r)[c0..c0 + cols]);
    }
    out
}

fn put_block(dst: &mut Tensor, src: &Tensor, r0: usize, c0: usize) {
    for r in 0..src.rows() {
        dst.row_mut(r0 + r)[c0..c0 + src.cols()].copy_from_slice(src.row(r));
    }
}

fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, seq_len: usize, heads: usize) -> (Tensor, Vec<Tensor>) {
    let (rows, d) = q.shape();
    assert_eq!(k.shape(), (rows, d));
    assert_eq!(v.shape(), (rows, d));
    assert!(heads > 0 && d % heads == 0, "model dim {d} not divisible by {heads} heads");
    assert!(rows % seq_len == 0);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(rows, d);
    let mut probs = Vec::with_capacity(rows / seq_len * heads);
    for b in 0..rows / seq_len {
        for h in 0..heads {
            let qb = block(q, b * seq_len, seq_len, h * dh, dh);
            let kb = block(k, b * seq_len, seq_len, h * dh, dh);
            let vb = block(v, b * seq_len, seq_len, h * dh, dh);
            let mut p = qb.matmul_t(&kb).scale(scale);
            for r in 0..seq_len {
                softmax_in_place(p.row_mut(r));
            }
            put_block(&mut out, &p.matmul(&vb), b * seq_len, h * dh);
            probs.push(p);
        }
    }
    (out, probs)
}

fn attention_backward(
    g: &Tensor,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    seq_len: usize,
    heads: usize,
    probs: &[Tensor],
) -> (Tensor, Tensor, Tensor) {
    let (rows, d) = q.shape();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = Tensor::zeros(rows, d);
    let mut gk = Tensor::zeros(rows, d);
    let mut gv = Tensor::zeros(rows, d);
    for b in 0..rows / seq_len {
        for h in 0..heads {
            let p = &probs[b * heads + h];
            let gb = block(g, b * seq_len, seq_len, h * dh, dh);
            let qb = block(q, b * seq_len, seq_len, h * dh, dh);
            let kb = block(k, b * seq_len, seq_len, h * dh, dh);
            let vb = block(v, b * seq_len, seq_len, h * dh, dh);
            put_block(&mut gv, &p.t_matmul(&gb), b * seq_len, h * dh);
            let gp = gb.matmul_t(&vb);
            let mut gs = Tensor::zeros(seq_len, seq_len);
            for r in 0..seq_len {
                let dot: f64 = gp.row(r).iter().zip(p.row(r)).map(|(a, b)| a * b).sum();
                for ((o, &gpi), &pi) in gs.row_mut(r).iter_mut().zip(gp.row(r)).zip(p.row(r)) {
                    *o = pi * (gpi - dot) * scale;
                }
            }
            put_block(&mut gq, &gs.matmul(&kb), b * seq_len, h * dh);
            put_block(&mut gk, &gs.t_matmul(&qb), b * seq_len, h * dh);
        }
    }
    (gq, gk, gv)
}

//! Reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are
//! borrowed from a [`ParamSet`], never copied. Sequences are laid out
//! row-wise: a batch of `S` sequences of length `L` is an `(S·L) × d`
//! tensor whose row `s·L + l` holds item `l` of sequence `s`.

use std::ops::Range;

use super::{ParamId, ParamSet};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SliceCols(Var, Range<usize>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    /// Per-row standardisation; saves `1/σ` per row.
    LayerNorm(Var, Vec<f64>),
    /// Per-column standardisation within groups of consecutive rows; saves
    /// `1/σ` per (group, column).
    GroupNorm {
        x: Var,
        group: usize,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        probs: Vec<f64>,
    },
    AddTiled(Var, Var),
    PrependToken {
        x: Var,
        token: Var,
        items: usize,
    },
    SoftmaxCe {
        scores: Var,
        targets: Vec<usize>,
        group: usize,
        probs: Vec<f64>,
    },
    Mse {
        x: Var,
        target: Tensor,
    },
    SumAbs(Var),
    /// Scalar with an externally computed gradient with respect to `x`.
    Custom {
        x: Var,
        grad: Tensor,
    },
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'a> {
    params: &'a ParamSet,
    nodes: Vec<Node<'a>>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_nodes: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// One gradient per parameter in `ParamSet` order; parameters the loss
    /// does not depend on get zeros. A parameter used several times in the
    /// graph gets the sum of its uses.
    pub fn for_params(&self, params: &ParamSet) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = params.tensors().iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        for &(id, node) in &self.param_nodes {
            if let Some(g) = &self.grads[node] {
                out[id.0].add_assign(g);
            }
        }
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamSet) -> Self {
        Graph { params, nodes: Vec::new() }
    }

    pub fn params(&self) -> &'a ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value<'a>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Value::Owned(t), Op::Leaf, false)
    }

    pub fn input_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Value::Borrowed(t), Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::of`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(Value::Owned(t), Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let t = self.params.get(id);
        self.push(Value::Borrowed(t), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = av.shape();
        let (br, bc) = bv.shape();
        let (bk, m) = if trans_b { (bc, br) } else { (br, bc) };
        assert_eq!(k, bk, "matmul inner dimensions {:?} x {:?} (trans_b={trans_b})", av.shape(), bv.shape());
        let mut out = Tensor::zeros(n, m);
        gemm(1.0, av, false, bv, trans_b, 0.0, &mut out);
        let ng = self.needs(a) || self.needs(b);
        self.push(Value::Owned(out), Op::MatMul { a, b, trans_b }, ng)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "{what}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(Value::Owned(out), Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(Value::Owned(out), Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(Value::Owned(out), Op::Mul(a, b), ng)
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.broadcast_row(a, row, |x, r| x + r);
        let ng = self.needs(a) || self.needs(row);
        self.push(Value::Owned(out), Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `1 × c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.broadcast_row(a, row, |x, r| x * r);
        let ng = self.needs(a) || self.needs(row);
        self.push(Value::Owned(out), Op::MulRow(a, row), ng)
    }

    fn broadcast_row(&self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "broadcast operand must be a row");
        assert_eq!(av.cols(), rv.cols(), "broadcast width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (x, &b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *x = f(*x, b);
            }
        }
        out
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(Value::Owned(out), Op::Scale(a, s), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(Value::Owned(out), Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(Value::Owned(out), Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(Value::Owned(out), Op::Relu(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, cols: Range<usize>) -> Var {
        let out = self.value(a).slice_cols(cols.clone());
        let ng = self.needs(a);
        self.push(Value::Owned(out), Op::SliceCols(a, cols), ng)
    }

    /// Row `i` of the result is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let out = self.value(a).select_rows(&idx);
        let ng = self.needs(a);
        self.push(Value::Owned(out), Op::GatherRows(a, idx), ng)
    }

    /// Stacks tensors of equal width vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(v.data());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Value::Owned(Tensor::from_vec(rows, cols, data)), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Places tensors of equal height side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Value::Owned(out), Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Standardises each row over its columns (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let c = x.cols() as f64;
        let mut out = x.clone();
        let mut inv = Vec::with_capacity(x.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv.push(is);
        }
        let ng = self.needs(a);
        self.push(Value::Owned(out), Op::LayerNorm(a, inv), ng)
    }

    /// Standardises each column within every block of `group` consecutive rows.
    pub fn group_norm(&mut self, a: Var, group: usize, eps: f64) -> Var {
        let x = self.value(a);
        let (n, c) = x.shape();
        assert!(group > 0 && n % group == 0, "group_norm: {n} rows not divisible into groups of {group}");
        let mut out = x.clone();
        let mut inv = Vec::with_capacity(n / group * c);
        let g = group as f64;
        for s in 0..n / group {
            for j in 0..c {
                let mean = (0..group).map(|t| out[(s * group + t, j)]).sum::<f64>() / g;
                let var = (0..group).map(|t| (out[(s * group + t, j)] - mean).powi(2)).sum::<f64>() / g;
                let is = 1.0 / (var + eps).sqrt();
                for t in 0..group {
                    let v = &mut out[(s * group + t, j)];
                    *v = (*v - mean) * is;
                }
                inv.push(is);
            }
        }
        let ng = self.needs(a);
        self.push(Value::Owned(out), Op::GroupNorm { x: a, group, inv_std: inv }, ng)
    }

    /// Scaled dot-product self-attention within each sequence of `seq_len`
    /// rows, `heads` heads splitting the columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq_len: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        assert_eq!(kv.shape(), (n, d), "attention key shape");
        assert_eq!(vv.shape(), (n, d), "attention value shape");
        assert!(heads > 0 && d % heads == 0, "attention: {d} columns over {heads} heads");
        assert!(seq_len > 0 && n % seq_len == 0, "attention: {n} rows over sequences of {seq_len}");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let seqs = n / seq_len;
        let l = seq_len;
        let mut probs = vec![0.0; seqs * heads * l * l];
        let mut out = Tensor::zeros(n, d);
        for s in 0..seqs {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let p = &mut probs[(s * heads + h) * l * l..(s * heads + h + 1) * l * l];
                for i in 0..l {
                    let qi = &qv.row(s * l + i)[cols.clone()];
                    let pi = &mut p[i * l..(i + 1) * l];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..l {
                        let kj = &kv.row(s * l + j)[cols.clone()];
                        pi[j] = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                        mx = mx.max(pi[j]);
                    }
                    let mut z = 0.0;
                    for x in pi.iter_mut() {
                        *x = (*x - mx).exp();
                        z += *x;
                    }
                    pi.iter_mut().for_each(|x| *x /= z);
                    let orow = &mut out.row_mut(s * l + i)[cols.clone()];
                    for j in 0..l {
                        let vj = &vv.row(s * l + j)[cols.clone()];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += pi[j] * x;
                        }
                    }
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(Value::Owned(out), Op::Attention { q, k, v, heads, seq_len, probs }, ng)
    }

    /// Adds row `r mod L` of the `L × c` table `tile` to row `r` of `a`.
    pub fn add_tiled(&mut self, a: Var, tile: Var) -> Var {
        let (av, tv) = (self.value(a), self.value(tile));
        let l = tv.rows();
        assert_eq!(av.cols(), tv.cols(), "add_tiled width");
        assert!(l > 0 && av.rows() % l == 0, "add_tiled: rows not a multiple of the tile");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (x, &t) in out.row_mut(r).iter_mut().zip(tv.row(r % l)) {
                *x += t;
            }
        }
        let ng = self.needs(a) || self.needs(tile);
        self.push(Value::Owned(out), Op::AddTiled(a, tile), ng)
    }

    /// Inserts the `1 × c` row `token` before each sequence of `items` rows.
    pub fn prepend_token(&mut self, x: Var, token: Var, items: usize) -> Var {
        let (xv, tv) = (self.value(x), self.value(token));
        assert_eq!(tv.rows(), 1, "token must be a single row");
        assert_eq!(xv.cols(), tv.cols(), "token width");
        assert!(items > 0 && xv.rows() % items == 0, "prepend_token: ragged sequences");
        let seqs = xv.rows() / items;
        let mut out = Tensor::zeros(seqs * (items + 1), xv.cols());
        for s in 0..seqs {
            out.row_mut(s * (items + 1)).copy_from_slice(tv.row(0));
            for t in 0..items {
                out.row_mut(s * (items + 1) + 1 + t).copy_from_slice(xv.row(s * items + t));
            }
        }
        let ng = self.needs(x) || self.needs(token);
        self.push(Value::Owned(out), Op::PrependToken { x, token, items }, ng)
    }

    /// Mean over groups of `-log softmax(scores_group)[target]`. `scores` is
    /// a column holding `group` consecutive candidates per problem.
    pub fn softmax_cross_entropy(&mut self, scores: Var, targets: Vec<usize>, group: usize) -> Var {
        let sv = self.value(scores);
        assert_eq!(sv.cols(), 1, "scores must be a column");
        assert_eq!(sv.rows(), targets.len() * group, "one target per group");
        let mut probs = vec![0.0; sv.rows()];
        let mut loss = 0.0;
        for (p, &t) in targets.iter().enumerate() {
            assert!(t < group, "target {t} out of range");
            let s = &sv.data()[p * group..(p + 1) * group];
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
            for (j, x) in s.iter().enumerate() {
                probs[p * group + j] = (x - mx).exp() / z;
            }
            loss += z.ln() + mx - s[t];
        }
        loss /= targets.len().max(1) as f64;
        let ng = self.needs(scores);
        self.push(Value::Owned(Tensor::scalar(loss)), Op::SoftmaxCe { scores, targets, group, probs }, ng)
    }

    /// Mean squared error over every element.
    pub fn mse(&mut self, x: Var, target: Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape(), "mse target shape");
        let n = xv.len().max(1) as f64;
        let loss = xv.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let ng = self.needs(x);
        self.push(Value::Owned(Tensor::scalar(loss)), Op::Mse { x, target }, ng)
    }

    pub fn sum_abs(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v.abs()).sum();
        let ng = self.needs(x);
        self.push(Value::Owned(Tensor::scalar(s)), Op::SumAbs(x), ng)
    }

    /// A scalar `value` whose gradient with respect to `x` is `grad`.
    pub fn custom_scalar(&mut self, x: Var, value: f64, grad: Tensor) -> Var {
        assert_eq!(self.value(x).shape(), grad.shape(), "custom gradient shape");
        let ng = self.needs(x);
        self.push(Value::Owned(Tensor::scalar(value)), Op::Custom { x, grad }, ng)
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let param_nodes = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Gradients { grads, param_nodes }
    }

    /// Gradient buffer for `v`, created as zeros on first use.
    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut Tensor {
        let (r, c) = self.value(v).shape();
        grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if self.needs(v) {
            f(self.slot(grads, v));
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.nodes[i].value.get();
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(a), self.value(b));
                // C = A·B  : dA = G·Bᵀ, dB = Aᵀ·G
                // C = A·Bᵀ : dA = G·B,  dB = Gᵀ·A
                self.accumulate(grads, a, |da| gemm(1.0, g, false, bv, !trans_b, 1.0, da));
                self.accumulate(grads, b, |db| {
                    if trans_b {
                        gemm(1.0, g, true, av, false, 1.0, db)
                    } else {
                        gemm(1.0, av, true, g, false, 1.0, db)
                    }
                });
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, |d| d.add_assign(g));
                self.accumulate(grads, b, |d| d.add_assign(g));
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, |d| d.add_assign(g));
                self.accumulate(grads, b, |d| zip_acc(d, g, |_, gv| -gv));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                self.accumulate(grads, a, |d| zip3_acc(d, g, bv, |gv, y| gv * y));
                self.accumulate(grads, b, |d| zip3_acc(d, g, av, |gv, x| gv * x));
            }
            &Op::AddRow(a, row) => {
                self.accumulate(grads, a, |d| d.add_assign(g));
                self.accumulate(grads, row, |d| {
                    let dr = d.data_mut();
                    for r in 0..g.rows() {
                        for (x, &gv) in dr.iter_mut().zip(g.row(r)) {
                            *x += gv;
                        }
                    }
                });
            }
            &Op::MulRow(a, row) => {
                let (av, rv) = (self.value(a), self.value(row));
                self.accumulate(grads, a, |d| {
                    for r in 0..g.rows() {
                        for ((x, &gv), &w) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(rv.data()) {
                            *x += gv * w;
                        }
                    }
                });
                self.accumulate(grads, row, |d| {
                    let dr = d.data_mut();
                    for r in 0..g.rows() {
                        for ((x, &gv), &a) in dr.iter_mut().zip(g.row(r)).zip(av.row(r)) {
                            *x += gv * a;
                        }
                    }
                });
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, |d| zip_acc(d, g, |_, gv| gv * s)),
            &Op::Sigmoid(a) => self.accumulate(grads, a, |d| zip3_acc(d, g, out, |gv, y| gv * y * (1.0 - y))),
            &Op::Tanh(a) => self.accumulate(grads, a, |d| zip3_acc(d, g, out, |gv, y| gv * (1.0 - y * y))),
            &Op::Relu(a) => {
                let av = self.value(a);
                self.accumulate(grads, a, |d| zip3_acc(d, g, av, |gv, x| if x > 0.0 { gv } else { 0.0 }))
            }
            Op::SliceCols(a, cols) => self.accumulate(grads, *a, |d| {
                for r in 0..g.rows() {
                    for (x, &gv) in d.row_mut(r)[cols.clone()].iter_mut().zip(g.row(r)) {
                        *x += gv;
                    }
                }
            }),
            Op::GatherRows(a, idx) => self.accumulate(grads, *a, |d| {
                for (r, &src) in idx.iter().enumerate() {
                    for (x, &gv) in d.row_mut(src).iter_mut().zip(g.row(r)) {
                        *x += gv;
                    }
                }
            }),
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let src = &g.data()[offset..offset + n];
                    self.accumulate(grads, p, |d| {
                        for (x, &gv) in d.data_mut().iter_mut().zip(src) {
                            *x += gv;
                        }
                    });
                    offset += n;
                }
                debug_assert_eq!(offset, g.rows() * cols);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    self.accumulate(grads, p, |d| {
                        for r in 0..d.rows() {
                            for (x, &gv) in d.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + c]) {
                                *x += gv;
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::LayerNorm(a, inv) => self.accumulate(grads, *a, |d| {
                let c = g.cols() as f64;
                for r in 0..g.rows() {
                    let (gr, yr) = (g.row(r), out.row(r));
                    let mg = gr.iter().sum::<f64>() / c;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c;
                    for ((x, &gv), &y) in d.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *x += inv[r] * (gv - mg - y * mgy);
                    }
                }
            }),
            Op::GroupNorm { x, group, inv_std } => self.accumulate(grads, *x, |d| {
                let (n, c) = g.shape();
                let gs = *group as f64;
                for s in 0..n / group {
                    for j in 0..c {
                        let rows = s * group..(s + 1) * group;
                        let mg = rows.clone().map(|r| g[(r, j)]).sum::<f64>() / gs;
                        let mgy = rows.clone().map(|r| g[(r, j)] * out[(r, j)]).sum::<f64>() / gs;
                        let is = inv_std[s * c + j];
                        for r in rows {
                            d[(r, j)] += is * (g[(r, j)] - mg - out[(r, j)] * mgy);
                        }
                    }
                }
            }),
            &Op::Attention { q, k, v, heads, seq_len, ref probs } => {
                self.attention_backward(g, q, k, v, heads, seq_len, probs, grads);
            }
            &Op::AddTiled(a, tile) => {
                self.accumulate(grads, a, |d| d.add_assign(g));
                let l = self.value(tile).rows();
                self.accumulate(grads, tile, |d| {
                    for r in 0..g.rows() {
                        for (x, &gv) in d.row_mut(r % l).iter_mut().zip(g.row(r)) {
                            *x += gv;
                        }
                    }
                });
            }
            &Op::PrependToken { x, token, items } => {
                let seqs = g.rows() / (items + 1);
                self.accumulate(grads, x, |d| {
                    for s in 0..seqs {
                        for t in 0..items {
                            for (a, &gv) in d.row_mut(s * items + t).iter_mut().zip(g.row(s * (items + 1) + 1 + t)) {
                                *a += gv;
                            }
                        }
                    }
                });
                self.accumulate(grads, token, |d| {
                    for s in 0..seqs {
                        for (a, &gv) in d.data_mut().iter_mut().zip(g.row(s * (items + 1))) {
                            *a += gv;
                        }
                    }
                });
            }
            Op::SoftmaxCe { scores, targets, group, probs } => self.accumulate(grads, *scores, |d| {
                let scale = g.item() / targets.len().max(1) as f64;
                let dd = d.data_mut();
                for (p, &t) in targets.iter().enumerate() {
                    for j in 0..*group {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dd[p * group + j] += scale * (probs[p * group + j] - onehot);
                    }
                }
            }),
            Op::Mse { x, target } => {
                let xv = self.value(*x);
                let scale = 2.0 * g.item() / xv.len().max(1) as f64;
                self.accumulate(grads, *x, |d| zip3_acc(d, xv, target, |a, b| scale * (a - b)));
            }
            &Op::SumAbs(x) => {
                let xv = self.value(x);
                let gi = g.item();
                self.accumulate(grads, x, |d| zip_acc(d, xv, |_, a| gi * sign(a)));
            }
            Op::Custom { x, grad } => {
                let gi = g.item();
                self.accumulate(grads, *x, |d| zip_acc(d, grad, |_, gv| gi * gv));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        l: usize,
        probs: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Tensor::zeros(n, d);
        let mut dk = Tensor::zeros(n, d);
        let mut dv = Tensor::zeros(n, d);
        let mut ds = vec![0.0; l];
        for s in 0..n / l {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let p = &probs[(s * heads + h) * l * l..(s * heads + h + 1) * l * l];
                for i in 0..l {
                    let gi = &g.row(s * l + i)[cols.clone()];
                    let pi = &p[i * l..(i + 1) * l];
                    let mut dot_pd = 0.0;
                    for j in 0..l {
                        let vj = &vv.row(s * l + j)[cols.clone()];
                        ds[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                        dot_pd += pi[j] * ds[j];
                        for (x, &gv) in dv.row_mut(s * l + j)[cols.clone()].iter_mut().zip(gi) {
                            *x += pi[j] * gv;
                        }
                    }
                    for j in 0..l {
                        let dsc = scale * pi[j] * (ds[j] - dot_pd);
                        if dsc == 0.0 {
                            continue;
                        }
                        let kj = &kv.row(s * l + j)[cols.clone()];
                        for (x, &kx) in dq.row_mut(s * l + i)[cols.clone()].iter_mut().zip(kj) {
                            *x += dsc * kx;
                        }
                        let qi = &qv.row(s * l + i)[cols.clone()];
                        for (x, &qx) in dk.row_mut(s * l + j)[cols.clone()].iter_mut().zip(qi) {
                            *x += dsc * qx;
                        }
                    }
                }
            }
        }
        self.accumulate(grads, q, |d| d.add_assign(&dq));
        self.accumulate(grads, k, |d| d.add_assign(&dk));
        self.accumulate(grads, v, |d| d.add_assign(&dv));
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_acc(d: &mut Tensor, a: &Tensor, f: impl Fn(f64, f64) -> f64) {
    for (x, &y) in d.data_mut().iter_mut().zip(a.data()) {
        *x += f(*x, y);
    }
}

fn zip3_acc(d: &mut Tensor, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) {
    for ((x, &p), &q) in d.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *x += f(p, q);
    }
}

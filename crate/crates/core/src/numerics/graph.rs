use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use super::{gemm, Group, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A block of query rows that may only attend to a block of key rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionGroup {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: Vec<AttentionGroup>,
        probs: Vec<Vec<f64>>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Vec<f64>>,
    vars: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    /// Gradient of a variable created with [`Graph::variable`].
    pub fn var(&self, v: Var) -> Option<&[f64]> {
        self.vars.get(&v.0).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Adds `scale * other` into `self` (parameter gradients only).
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (id, g) in &other.params {
            let acc = self
                .params
                .entry(*id)
                .or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in acc.iter_mut().zip(g) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.params.values_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Tape of recorded operations.
///
/// Parameters are borrowed from a [`ParamStore`]; only those whose group is
/// listed as trainable receive gradients.
pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    trainable: Vec<Group>,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

fn dim_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn require_2d(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dimension(format!("{op}: expected a matrix, got {s:?}"))),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'s> Graph<'s> {
    /// A graph with no parameter store, for free-standing computations.
    pub fn standalone() -> Self {
        Graph {
            store: None,
            trainable: Vec::new(),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn new(store: &'s ParamStore, trainable: &[Group]) -> Self {
        Graph {
            store: Some(store),
            trainable: trainable.to_vec(),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    /// Graph over `store` that records no gradients.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self::new(store, &[])
    }

    pub fn store(&self) -> Option<&'s ParamStore> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .store
                .expect("param node without a store")
                .value(*id),
        }
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Free variable whose gradient is reported by [`Gradients::var`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        let store = self.store.expect("Graph::param needs a parameter store");
        let rg = self.trainable.contains(&store.get(id).group);
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: rg,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_2d("matmul", ta)?;
        let (k2, n) = require_2d("matmul", tb)?;
        if k != k2 {
            return Err(dim_err("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            ta.data(),
            (k, 1),
            tb.data(),
            (n, 1),
            0.0,
            &mut out,
            (n, 1),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (_, n) = require_2d("add_row", ta)?;
        if tr.len() != n {
            return Err(dim_err("add_row", ta.shape(), tr.shape()));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            add_into(chunk, tr.data());
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|x| x * s).collect(),
        };
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|&x| gelu(x)).collect(),
        };
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.shape().len() {
            return Err(Error::Dimension(format!(
                "softmax: axis {axis} invalid for shape {:?}",
                tx.shape()
            )));
        }
        let (outer, len, inner) = axis_split(tx.shape(), axis);
        let mut out = tx.data().to_vec();
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let max = (0..len)
                    .map(|i| out[idx(i)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for i in 0..len {
                    let e = (out[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    sum += e;
                }
                for i in 0..len {
                    out[idx(i)] /= sum;
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes each row of a matrix, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (rows, d) = require_2d("layer_norm", tx)?;
        if tg.len() != d || tb.len() != d {
            return Err(dim_err("layer_norm", tx.shape(), tg.shape()));
        }
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of `table`; works on any matrix-valued node.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = require_2d("embedding", tt)?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index { id, len: v });
            }
            out.extend_from_slice(tt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is set.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let tl = self.value(logits);
        let (l, k) = require_2d("masked_cross_entropy", tl)?;
        if targets.len() != l || mask.len() != l {
            return Err(Error::Dimension(format!(
                "masked_cross_entropy: logits {:?}, {} targets, {} mask entries",
                tl.shape(),
                targets.len(),
                mask.len()
            )));
        }
        let rows: Vec<usize> = (0..l).filter(|&r| mask[r]).collect();
        if rows.is_empty() {
            return Err(Error::EmptyMask);
        }
        let mut probs = Vec::with_capacity(rows.len() * k);
        let mut sel_targets = Vec::with_capacity(rows.len());
        let mut total = 0.0;
        for &r in &rows {
            let t = targets[r];
            if t >= k {
                return Err(Error::Index { id: t, len: k });
            }
            let row = tl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
            sel_targets.push(t);
        }
        let loss = total / rows.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                rows,
                targets: sel_targets,
                probs,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention without a causal mask.
    ///
    /// With `groups`, each block of query rows attends only to its block of
    /// key rows; query rows outside every group produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: Option<&[AttentionGroup]>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (lq, d) = require_2d("attention", tq)?;
        let (lk, dk) = require_2d("attention", tk)?;
        if dk != d || tv.shape() != tk.shape() {
            return Err(dim_err("attention", tq.shape(), tk.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!(
                "attention: width {d} not divisible by {heads} heads"
            )));
        }
        let groups: Vec<AttentionGroup> = match groups {
            Some(g) => g.to_vec(),
            None => vec![AttentionGroup {
                queries: 0..lq,
                keys: 0..lk,
            }],
        };
        for g in &groups {
            if g.queries.end > lq || g.keys.end > lk || g.keys.is_empty() {
                return Err(Error::Dimension(format!(
                    "attention: group {g:?} invalid for {lq} queries and {lk} keys"
                )));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; lq * d];
        let mut probs = Vec::with_capacity(groups.len());
        for g in &groups {
            let (gq, gk) = (g.queries.len(), g.keys.len());
            let mut p = vec![0.0; heads * gq * gk];
            for h in 0..heads {
                let ph = &mut p[h * gq * gk..(h + 1) * gq * gk];
                gemm(
                    gq,
                    dh,
                    gk,
                    scale,
                    &tq.data()[g.queries.start * d + h * dh..],
                    (d, 1),
                    &tk.data()[g.keys.start * d + h * dh..],
                    (1, d),
                    0.0,
                    ph,
                    (gk, 1),
                );
                for row in ph.chunks_mut(gk) {
                    softmax_in_place(row);
                }
                gemm(
                    gq,
                    gk,
                    dh,
                    1.0,
                    ph,
                    (gk, 1),
                    &tv.data()[g.keys.start * d + h * dh..],
                    (d, 1),
                    0.0,
                    &mut out[g.queries.start * d + h * dh..],
                    (d, 1),
                );
            }
            probs.push(p);
        }
        let t = Tensor::new(vec![lq, d], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat_rows: no inputs".into()))?;
        let cols = require_2d("concat_rows", self.value(*first))?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (r, c) = require_2d("concat_rows", t)?;
            if c != cols {
                return Err(dim_err("concat_rows", self.value(*first).shape(), t.shape()));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, range: Range<usize>) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = require_2d("slice_rows", t)?;
        if range.start > range.end || range.end > r {
            return Err(Error::Dimension(format!(
                "slice_rows: range {range:?} outside {r} rows"
            )));
        }
        let data = t.data()[range.start * c..range.end * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![range.len(), c], data)?,
            Op::SliceRows {
                x,
                start: range.start,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `x @ w + b` for a weight of shape `[in, out]` and bias of length `out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward: loss must have one element, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut result = Gradients::default();
        if !self.nodes[loss.0].requires_grad {
            return Ok(result);
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            match node.op {
                Op::Param(id) => {
                    result.params.insert(id, g);
                }
                Op::Leaf => {
                    result.vars.insert(i, g);
                }
                _ => {}
            }
        }
        Ok(result)
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    gemm(m, n, k, 1.0, g, (n, 1), tb.data(), (1, n), 1.0, ga, (k, 1));
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    gemm(k, m, n, 1.0, ta.data(), (1, k), g, (n, 1), 1.0, gb, (n, 1));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.grad_buf(grads, *v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    add_into(ga, g);
                }
                let n = self.value(*row).len();
                if let Some(gr) = self.grad_buf(grads, *row) {
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * tb[i];
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ta[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for (d, v) in ga.iter_mut().zip(g) {
                        *d += s * v;
                    }
                }
            }
            Op::Gelu(a) => {
                let ta = self.value(*a).data();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * gelu_grad(ta[i]);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = match &node.value {
                    Value::Owned(t) => t,
                    Value::Param(_) => unreachable!(),
                };
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let yd = y.data();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * len + i) * inner + j;
                            let dot: f64 = (0..len).map(|i| g[idx(i)] * yd[idx(i)]).sum();
                            for i in 0..len {
                                gx[idx(i)] += yd[idx(i)] * (g[idx(i)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).len();
                let gd = self.value(*gain).data();
                if let Some(gg) = self.grad_buf(grads, *gain) {
                    for (r, chunk) in g.chunks(d).enumerate() {
                        for c in 0..d {
                            gg[c] += chunk[c] * xhat[r * d + c];
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *bias) {
                    for chunk in g.chunks(d) {
                        add_into(gb, chunk);
                    }
                }
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (r, chunk) in g.chunks(d).enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for c in 0..d {
                            let gh = chunk[c] * gd[c];
                            mean_g += gh;
                            mean_gx += gh * xh[c];
                        }
                        mean_g /= d as f64;
                        mean_gx /= d as f64;
                        for c in 0..d {
                            let gh = chunk[c] * gd[c];
                            gx[r * d + c] += rstd[r] * (gh - mean_g - xh[c] * mean_gx);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).cols();
                if let Some(gt) = self.grad_buf(grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                rows,
                targets,
                probs,
            } => {
                let k = self.value(*logits).cols();
                let scale = g[0] / rows.len() as f64;
                if let Some(gl) = self.grad_buf(grads, *logits) {
                    for (i, (&r, &t)) in rows.iter().zip(targets).enumerate() {
                        let p = &probs[i * k..(i + 1) * k];
                        let dst = &mut gl[r * k..(r + 1) * k];
                        for c in 0..k {
                            dst[c] += scale * p[c];
                        }
                        dst[t] -= scale;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            } => self.attention_backward(g, grads, (*q, *k, *v), *heads, groups, probs),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if let Some(gp) = self.grad_buf(grads, *p) {
                        add_into(gp, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = self.value(*x).cols();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    add_into(&mut gx[start * c..start * c + g.len()], g);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
        }
    }

    fn attention_backward(
        &self,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        groups: &[AttentionGroup],
        probs: &[Vec<f64>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        // Fresh buffers: q, k and v may alias the same node.
        let mut gq = self.rg(q).then(|| vec![0.0; tq.len()]);
        let mut gk = self.rg(k).then(|| vec![0.0; tk.len()]);
        let mut gv = self.rg(v).then(|| vec![0.0; tv.len()]);
        for (grp, p) in groups.iter().zip(probs) {
            let (nq, nk) = (grp.queries.len(), grp.keys.len());
            let (q0, k0) = (grp.queries.start * d, grp.keys.start * d);
            let mut ds = vec![0.0; nq * nk];
            for h in 0..heads {
                let ph = &p[h * nq * nk..(h + 1) * nq * nk];
                let go = &g[q0 + h * dh..];
                if let Some(gv) = gv.as_mut() {
                    gemm(nk, nq, dh, 1.0, ph, (1, nk), go, (d, 1), 1.0, &mut gv[k0 + h * dh..], (d, 1));
                }
                if gq.is_none() && gk.is_none() {
                    continue;
                }
                gemm(nq, dh, nk, 1.0, go, (d, 1), &tv.data()[k0 + h * dh..], (1, d), 0.0, &mut ds, (nk, 1));
                for (srow, prow) in ds.chunks_mut(nk).zip(ph.chunks(nk)) {
                    let dot: f64 = srow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for (s, pv) in srow.iter_mut().zip(prow) {
                        *s = pv * (*s - dot);
                    }
                }
                if let Some(gq) = gq.as_mut() {
                    gemm(nq, nk, dh, scale, &ds, (nk, 1), &tk.data()[k0 + h * dh..], (d, 1), 1.0, &mut gq[q0 + h * dh..], (d, 1));
                }
                if let Some(gk) = gk.as_mut() {
                    gemm(nk, nq, dh, scale, &ds, (1, nk), &tq.data()[q0 + h * dh..], (d, 1), 1.0, &mut gk[k0 + h * dh..], (d, 1));
                }
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(buf) = buf {
                match grads[var.0].as_mut() {
                    Some(existing) => add_into(existing, &buf),
                    None => grads[var.0] = Some(buf),
                }
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is a topological order
//! by construction and `backward` is a single reverse sweep. Parameters are
//! borrowed rather than copied; every other value is owned by the tape.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::grad::GradientVector;
use crate::tensor::{
    gelu, gelu_grad, gemm_nn, gemm_nt, gemm_tn_acc, layer_norm_row, log_softmax_row,
    softmax_in_place, Scalar, Tensor,
};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'a, S> {
    Owned(Tensor<S>),
    Borrowed(&'a Tensor<S>),
}

impl<S> Value<'_, S> {
    fn get(&self) -> &Tensor<S> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op<S> {
    Constant,
    Param(String),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    Sum(NodeId),
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Embed {
        table: NodeId,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Gelu(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: Vec<Range<usize>>,
        // one row-major len×len block per (segment, head); upper triangle is zero
        probs: Vec<Vec<S>>,
    },
    WeightedSum {
        x: NodeId,
        weights: Tensor<S>,
    },
    KlRows {
        log_q: NodeId,
        log_p: Tensor<S>,
        row_weights: Vec<S>,
    },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Embed { .. } => "embed",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax_rows",
            Op::LogSoftmax(_) => "log_softmax_rows",
            Op::Attention { .. } => "causal_attention",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::KlRows { .. } => "kl_rows",
        }
    }
}

struct Node<'a, S> {
    value: Value<'a, S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Tape of primitive operations.
pub struct Graph<'a, S: Scalar = f64> {
    nodes: Vec<Node<'a, S>>,
    non_finite: Option<String>,
}

impl<S: Scalar> Default for Graph<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, S: Scalar> Graph<'a, S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        self.nodes[id.0].value.get()
    }

    /// Fails if any recorded operation produced NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match &self.non_finite {
            Some(op) => Err(Error::NonFinite(op.clone())),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Value<'a, S>, op: Op<S>, requires_grad: bool) -> NodeId {
        if self.non_finite.is_none() && !value.get().all_finite() {
            self.non_finite = Some(op.name().to_string());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Trainable leaf. Its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: &'a Tensor<S>) -> NodeId {
        self.push(Value::Borrowed(value), Op::Param(name.into()), true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Value::Owned(value), Op::Constant, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Value::Owned(out), Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Value::Owned(out), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: NodeId, factor: S) -> Result<NodeId> {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.needs(x);
        Ok(self.push(Value::Owned(out), Op::Scale(x, factor), rg))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let mut acc = S::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let rg = self.needs(x);
        Ok(self.push(Value::Owned(Tensor::scalar(acc)), Op::Sum(x), rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2()?;
        let (k2, n) = tb.dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner extents differ: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![S::zero(); m * n];
        gemm_nn(m, k, n, ta.data(), tb.data(), &mut out);
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Value::Owned(out), Op::MatMul(a, b), rg))
    }

    /// Adds the vector `bias` to every row of the matrix `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (rows, cols) = tx.dims2()?;
        if tb.len() != cols {
            return Err(Error::Shape(format!(
                "add_row: bias of {} elements for {cols} columns",
                tb.len()
            )));
        }
        let mut data = tx.data().to_vec();
        for r in 0..rows {
            for (v, &b) in data[r * cols..(r + 1) * cols].iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = self.needs(x) || self.needs(bias);
        Ok(self.push(Value::Owned(out), Op::AddRow(x, bias), rg))
    }

    /// Gathers rows of `table` by index.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tt = self.value(table);
        let (rows, cols) = tt.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Shape(format!("embed: index {id} >= {rows} rows")));
            }
            data.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), cols], data)?;
        let rg = self.needs(table);
        Ok(self.push(
            Value::Owned(out),
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise layer normalization of a matrix.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        epsilon: S,
    ) -> Result<NodeId> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (rows, cols) = tx.dims2()?;
        if tg.len() != cols || tb.len() != cols {
            return Err(Error::Shape(format!(
                "layer_norm: gain/bias lengths {}/{} for {cols} columns",
                tg.len(),
                tb.len()
            )));
        }
        if epsilon <= S::zero() {
            return Err(Error::Contract(
                "layer_norm epsilon must be positive".into(),
            ));
        }
        let mut out = vec![S::zero(); rows * cols];
        let mut xhat = vec![S::zero(); rows * cols];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let span = r * cols..(r + 1) * cols;
            inv_std.push(layer_norm_row(
                &tx.data()[span.clone()],
                tg.data(),
                tb.data(),
                epsilon,
                &mut xhat[span.clone()],
                &mut out[span],
            ));
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        let rg = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Value::Owned(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(gelu);
        let rg = self.needs(x);
        Ok(self.push(Value::Owned(out), Op::Gelu(x), rg))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2()?;
        let mut data = tx.data().to_vec();
        for r in 0..rows {
            softmax_in_place(&mut data[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = self.needs(x);
        Ok(self.push(Value::Owned(out), Op::Softmax(x), rg))
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2()?;
        let mut data = vec![S::zero(); rows * cols];
        for r in 0..rows {
            log_softmax_row(tx.row(r), &mut data[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = self.needs(x);
        Ok(self.push(Value::Owned(out), Op::LogSoftmax(x), rg))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[N, d]`; each range in `segments` is one sequence and
    /// attends only to itself, row `i` seeing rows `≤ i` of its segment.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: &[Range<usize>],
    ) -> Result<NodeId> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = tq.dims2()?;
        if tk.shape() != tq.shape() || tv.shape() != tq.shape() {
            return Err(Error::Shape("attention: q, k, v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!(
                "attention: width {d} not divisible by {heads} heads"
            )));
        }
        let mut prev_end = 0;
        for seg in segments {
            if seg.start < prev_end || seg.end > n || seg.start >= seg.end {
                return Err(Error::Shape(format!(
                    "attention: bad segment {seg:?} for {n} rows"
                )));
            }
            prev_end = seg.end;
        }
        let dh = d / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut out = vec![S::zero(); n * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            let len = seg.len();
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![S::zero(); len * len];
                for i in 0..len {
                    let qi = &qd[(seg.start + i) * d + off..][..dh];
                    let row = &mut p[i * len..i * len + i + 1];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &kd[(seg.start + j) * d + off..][..dh];
                        let mut acc = S::zero();
                        for c in 0..dh {
                            acc += qi[c] * kj[c];
                        }
                        *s = acc * scale;
                    }
                    softmax_in_place(row);
                    let o = &mut out[(seg.start + i) * d + off..][..dh];
                    for (j, &pij) in row.iter().enumerate() {
                        let vj = &vd[(seg.start + j) * d + off..][..dh];
                        for c in 0..dh {
                            o[c] += pij * vj[c];
                        }
                    }
                }
                probs.push(p);
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        let rg = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Value::Owned(out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `Σ x ⊙ weights` for a constant `weights` of the same shape.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Tensor<S>) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.shape() != weights.shape() {
            return Err(Error::Shape(format!(
                "weighted_sum: {:?} vs {:?}",
                tx.shape(),
                weights.shape()
            )));
        }
        let mut acc = S::zero();
        for (&a, &w) in tx.data().iter().zip(weights.data()) {
            if w != S::zero() {
                acc += a * w;
            }
        }
        let rg = self.needs(x);
        Ok(self.push(
            Value::Owned(Tensor::scalar(acc)),
            Op::WeightedSum { x, weights },
            rg,
        ))
    }

    /// `Σ_r w_r · KL(p_r ‖ q_r)` where `log_q` is a row-wise log-distribution
    /// node and `log_p` a constant matrix of reference log-probabilities.
    pub fn kl_rows(
        &mut self,
        log_q: NodeId,
        log_p: Tensor<S>,
        row_weights: Vec<S>,
    ) -> Result<NodeId> {
        let tq = self.value(log_q);
        let (rows, cols) = tq.dims2()?;
        if log_p.shape() != tq.shape() || row_weights.len() != rows {
            return Err(Error::Shape(format!(
                "kl_rows: log_q {:?}, log_p {:?}, {} row weights",
                tq.shape(),
                log_p.shape(),
                row_weights.len()
            )));
        }
        let mut acc = S::zero();
        for (r, &w) in row_weights.iter().enumerate() {
            if w == S::zero() {
                continue;
            }
            let mut row = S::zero();
            for c in 0..cols {
                let lp = log_p.data()[r * cols + c];
                row += lp.exp() * (lp - tq.data()[r * cols + c]);
            }
            acc += w * row;
        }
        let rg = self.needs(log_q);
        Ok(self.push(
            Value::Owned(Tensor::scalar(acc)),
            Op::KlRows {
                log_q,
                log_p,
                row_weights,
            },
            rg,
        ))
    }

    /// Gradient of the scalar `loss` with respect to every parameter on the
    /// tape. Parameters that do not influence `loss` get a zero entry.
    pub fn backward(&self, loss: NodeId) -> Result<GradientVector<S>> {
        self.check_finite()?;
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(loss_value.shape(), S::one()));
        let mut out: BTreeMap<String, Tensor<S>> = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                if let Op::Param(name) = &node.op {
                    out.entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(node.value.get().shape()));
                }
                continue;
            };
            self.backprop_node(node, g, &mut grads, &mut out)?;
        }

        // parameters registered after `loss` still belong to the key set
        for node in &self.nodes[loss.0 + 1..] {
            if let Op::Param(name) = &node.op {
                out.entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(node.value.get().shape()));
            }
        }
        let grads = GradientVector::from_entries(out);
        if !grads.all_finite() {
            return Err(Error::NonFinite("backward".into()));
        }
        Ok(grads)
    }

    fn backprop_node(
        &self,
        node: &Node<'a, S>,
        g: Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
        out: &mut BTreeMap<String, Tensor<S>>,
    ) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Constant => {}
            Op::Param(name) => match out.get_mut(name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    out.insert(name.clone(), g);
                }
            },
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if self.needs(id) {
                        add_into(grads, id, self.value(id).shape(), gd);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (id, other) in [(*a, *b), (*b, *a)] {
                    if self.needs(id) {
                        let o = self.value(other).data();
                        let buf = grad_buf(grads, id, self.value(id).shape());
                        for ((acc, &gv), &ov) in buf.iter_mut().zip(gd).zip(o) {
                            *acc += gv * ov;
                        }
                    }
                }
            }
            Op::Scale(x, factor) => {
                let buf = grad_buf(grads, *x, self.value(*x).shape());
                for (acc, &gv) in buf.iter_mut().zip(gd) {
                    *acc += gv * *factor;
                }
            }
            Op::Sum(x) => {
                let gv = gd[0];
                let buf = grad_buf(grads, *x, self.value(*x).shape());
                for acc in buf.iter_mut() {
                    *acc += gv;
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2()?;
                let (_, n) = tb.dims2()?;
                if self.needs(*a) {
                    let mut da = vec![S::zero(); m * k];
                    gemm_nt(m, n, k, gd, tb.data(), &mut da);
                    add_into(grads, *a, ta.shape(), &da);
                }
                if self.needs(*b) {
                    let buf = grad_buf(grads, *b, tb.shape());
                    gemm_tn_acc(m, k, n, ta.data(), gd, buf);
                }
            }
            Op::AddRow(x, bias) => {
                let (rows, cols) = g.dims2()?;
                if self.needs(*x) {
                    add_into(grads, *x, self.value(*x).shape(), gd);
                }
                if self.needs(*bias) {
                    let buf = grad_buf(grads, *bias, self.value(*bias).shape());
                    for r in 0..rows {
                        for (acc, &gv) in buf.iter_mut().zip(&gd[r * cols..(r + 1) * cols]) {
                            *acc += gv;
                        }
                    }
                }
            }
            Op::Embed { table, ids } => {
                let cols = self.value(*table).dims2()?.1;
                let buf = grad_buf(grads, *table, self.value(*table).shape());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut buf[id * cols..(id + 1) * cols];
                    for (acc, &gv) in dst.iter_mut().zip(&gd[r * cols..(r + 1) * cols]) {
                        *acc += gv;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = g.dims2()?;
                let gain_v = self.value(*gain).data();
                if self.needs(*gain) {
                    let buf = grad_buf(grads, *gain, self.value(*gain).shape());
                    for r in 0..rows {
                        for c in 0..cols {
                            buf[c] += gd[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if self.needs(*bias) {
                    let buf = grad_buf(grads, *bias, self.value(*bias).shape());
                    for r in 0..rows {
                        for c in 0..cols {
                            buf[c] += gd[r * cols + c];
                        }
                    }
                }
                if self.needs(*x) {
                    let n = S::of(cols as f64);
                    let buf = grad_buf(grads, *x, self.value(*x).shape());
                    let mut dxhat = vec![S::zero(); cols];
                    for r in 0..rows {
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = S::zero();
                        let mut mean_dx = S::zero();
                        for c in 0..cols {
                            dxhat[c] = gd[r * cols + c] * gain_v[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xh[c];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for c in 0..cols {
                            buf[r * cols + c] += inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                let buf = grad_buf(grads, *x, self.value(*x).shape());
                for ((acc, &gv), &xv) in buf.iter_mut().zip(gd).zip(xd) {
                    *acc += gv * gelu_grad(xv);
                }
            }
            Op::Softmax(x) => {
                let (rows, cols) = g.dims2()?;
                let s = node.value.get().data();
                let buf = grad_buf(grads, *x, self.value(*x).shape());
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let mut dot = S::zero();
                    for c in span.clone() {
                        dot += s[c] * gd[c];
                    }
                    for c in span {
                        buf[c] += s[c] * (gd[c] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let (rows, cols) = g.dims2()?;
                let ls = node.value.get().data();
                let buf = grad_buf(grads, *x, self.value(*x).shape());
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let mut total = S::zero();
                    for c in span.clone() {
                        total += gd[c];
                    }
                    for c in span {
                        buf[c] += gd[c] - ls[c].exp() * total;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => self.backprop_attention(*q, *k, *v, *heads, segments, probs, gd, grads)?,
            Op::WeightedSum { x, weights } => {
                let gv = gd[0];
                let buf = grad_buf(grads, *x, self.value(*x).shape());
                for (acc, &w) in buf.iter_mut().zip(weights.data()) {
                    if w != S::zero() {
                        *acc += gv * w;
                    }
                }
            }
            Op::KlRows {
                log_q,
                log_p,
                row_weights,
            } => {
                let gv = gd[0];
                let cols = log_p.dims2()?.1;
                let buf = grad_buf(grads, *log_q, self.value(*log_q).shape());
                for (r, &w) in row_weights.iter().enumerate() {
                    if w == S::zero() {
                        continue;
                    }
                    for c in 0..cols {
                        buf[r * cols + c] -= gv * w * log_p.data()[r * cols + c].exp();
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: &[Range<usize>],
        probs: &[Vec<S>],
        gd: &[S],
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<()> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = tq.dims2()?;
        let dh = d / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut dq = vec![S::zero(); n * d];
        let mut dk = vec![S::zero(); n * d];
        let mut dv = vec![S::zero(); n * d];
        let mut blocks = probs.iter();
        for seg in segments {
            let len = seg.len();
            for h in 0..heads {
                let p = blocks
                    .next()
                    .expect("one probability block per segment and head");
                let off = h * dh;
                let mut ds = vec![S::zero(); len];
                for i in 0..len {
                    let go = &gd[(seg.start + i) * d + off..][..dh];
                    let prow = &p[i * len..i * len + i + 1];
                    let mut weighted = S::zero();
                    for (j, &pij) in prow.iter().enumerate() {
                        let vj = &vd[(seg.start + j) * d + off..][..dh];
                        let mut dp = S::zero();
                        for c in 0..dh {
                            dp += go[c] * vj[c];
                        }
                        ds[j] = dp;
                        weighted += pij * dp;
                        let dvj = &mut dv[(seg.start + j) * d + off..][..dh];
                        for c in 0..dh {
                            dvj[c] += pij * go[c];
                        }
                    }
                    let qi = &qd[(seg.start + i) * d + off..][..dh];
                    for (j, &pij) in prow.iter().enumerate() {
                        let dsij = pij * (ds[j] - weighted) * scale;
                        if dsij == S::zero() {
                            continue;
                        }
                        let kj = &kd[(seg.start + j) * d + off..][..dh];
                        let dqi = &mut dq[(seg.start + i) * d + off..][..dh];
                        for c in 0..dh {
                            dqi[c] += dsij * kj[c];
                        }
                        let dkj = &mut dk[(seg.start + j) * d + off..][..dh];
                        for c in 0..dh {
                            dkj[c] += dsij * qi[c];
                        }
                    }
                }
            }
        }
        let shape = [n, d];
        if self.needs(q) {
            add_into(grads, q, &shape, &dq);
        }
        if self.needs(k) {
            add_into(grads, k, &shape, &dk);
        }
        if self.needs(v) {
            add_into(grads, v, &shape, &dv);
        }
        Ok(())
    }
}

fn grad_buf<'g, S: Scalar>(
    grads: &'g mut [Option<Tensor<S>>],
    id: NodeId,
    shape: &[usize],
) -> &'g mut [S] {
    grads[id.0]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}

fn add_into<S: Scalar>(grads: &mut [Option<Tensor<S>>], id: NodeId, shape: &[usize], src: &[S]) {
    match &mut grads[id.0] {
        Some(t) => {
            for (acc, &v) in t.data_mut().iter_mut().zip(src) {
                *acc += v;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), src.to_vec()).expect("shape matches source"));
        }
    }
}

/// Compares the analytic gradient of `f` against central differences.
///
/// Returns the maximum over all parameter coordinates of
/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<S, F>(params: &BTreeMap<String, Tensor<S>>, step: f64, f: F) -> Result<f64>
where
    S: Scalar,
    F: for<'g> Fn(&mut Graph<'g, S>, &'g BTreeMap<String, Tensor<S>>) -> Result<NodeId>,
{
    if step <= 0.0 {
        return Err(Error::Contract("grad_check step must be positive".into()));
    }
    let analytic = {
        let mut g = Graph::new();
        let loss = f(&mut g, params)?;
        g.backward(loss)?
    };
    let eval = |p: &BTreeMap<String, Tensor<S>>| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, p)?;
        g.check_finite()?;
        Ok(g.value(loss).item()?.as_f64())
    };

    let mut work = params.clone();
    let mut worst = 0.0f64;
    for (name, tensor) in params {
        for i in 0..tensor.len() {
            let orig = tensor.data()[i];
            work.get_mut(name).expect("cloned key").data_mut()[i] = S::of(orig.as_f64() + step);
            let plus = eval(&work)?;
            work.get_mut(name).expect("cloned key").data_mut()[i] = S::of(orig.as_f64() - step);
            let minus = eval(&work)?;
            work.get_mut(name).expect("cloned key").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.get(name).map_or(0.0, |t| t.data()[i].as_f64());
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn params(entries: Vec<(&str, Tensor)>) -> BTreeMap<String, Tensor> {
        entries
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    #[test]
    fn sum_gives_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = rand_tensor(&mut rng, &[3, 4]);
        let mut g = Graph::new();
        let x = g.param("p", &p);
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[1.0; 12]);
    }

    #[test]
    fn zero_scaled_loss_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = rand_tensor(&mut rng, &[2, 2]);
        let mut g = Graph::new();
        let x = g.param("p", &p);
        let y = g.softmax_rows(x).unwrap();
        let s = g.sum(y).unwrap();
        let loss = g.scale(s, 0.0).unwrap();
        assert!(g.backward(loss).unwrap().is_zero());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let p = Tensor::<f64>::zeros(&[2, 2]);
        let mut g = Graph::new();
        let x = g.param("p", &p);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_entry_and_unused_params_get_zeros() {
        let a = Tensor::<f64>::filled(&[2], 2.0);
        let unused = Tensor::<f64>::filled(&[3], 1.0);
        let mut g = Graph::new();
        let x = g.param("a", &a);
        g.param("unused", &unused);
        let c = g.constant(Tensor::filled(&[2], 5.0));
        let y = g.mul(x, c).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.len(), 2);
        assert_eq!(grads.get("a").unwrap().data(), &[5.0, 5.0]);
        assert!(grads
            .get("unused")
            .unwrap()
            .data()
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn non_finite_values_are_reported() {
        let a = Tensor::new(vec![1], vec![f64::MAX]).unwrap();
        let mut g = Graph::new();
        let x = g.param("a", &a);
        let y = g.scale(x, 10.0).unwrap();
        let loss = g.sum(y).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::NonFinite(op)) if op == "scale"));
    }

    #[test]
    fn quadratic_grad_check() {
        let p = params(vec![("w", Tensor::filled(&[5], 1.0))]);
        let err = grad_check(&p, 1e-6, |g, p| {
            let w = g.param("w", &p["w"]);
            let sq = g.mul(w, w)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let p = params(vec![("w", Tensor::filled(&[3], 0.5))]);
        let err = grad_check(&p, 1e-6, |g, p| {
            let w = g.param("w", &p["w"]);
            let z = g.scale(w, 0.0)?;
            g.sum(z)
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn attention_rejects_overlapping_segments() {
        let t = Tensor::<f64>::zeros(&[4, 4]);
        let mut g = Graph::new();
        let x = g.constant(t);
        assert!(g.causal_attention(x, x, x, 2, &[0..3, 2..4]).is_err());
        assert!(g.causal_attention(x, x, x, 3, &[0..4]).is_err());
    }

    #[test]
    fn identical_graphs_are_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = params(vec![
            ("x", rand_tensor(&mut rng, &[5, 4])),
            ("w", rand_tensor(&mut rng, &[4, 4])),
        ]);
        let run = || {
            let mut g = Graph::new();
            let x = g.param("x", &p["x"]);
            let w = g.param("w", &p["w"]);
            let q = g.matmul(x, w).unwrap();
            let a = g.causal_attention(q, x, x, 2, &[0..2, 2..5]).unwrap();
            let l = g.log_softmax_rows(a).unwrap();
            let s = g.sum(l).unwrap();
            (g.value(s).clone(), g.backward(s).unwrap())
        };
        assert_eq!(run(), run());
    }
}

//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Forward ops append nodes in execution order (which is already a valid
//! topological order), so the backward pass is a single reverse sweep that
//! visits every node reachable from the loss exactly once. The op set is
//! exactly what a small masked multimodal decoder needs: matmul (plain and
//! B-transposed), elementwise add/mul/scale, row/column slicing and
//! concatenation, softmax, layer norm, gelu, embedding lookup with a split
//! base/latent table, masked fill, cross entropy, and sum.
//!
//! Graph construction and backward are single-threaded; every forward op
//! checks its output for NaN/Inf and fails loudly instead of drifting.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

/// Gradient map produced by `backward`: parameter path → gradient tensor.
pub type GradMap = BTreeMap<String, Tensor>;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    SliceRows(NodeId, usize, usize),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(NodeId),
    Embed {
        base: NodeId,
        latent: NodeId,
        ids: Vec<usize>,
        base_size: usize,
        shared: bool,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    MaskedFill {
        x: NodeId,
        blocked: Vec<bool>,
    },
    SumAll(NodeId),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, NodeId>,
    backward_ran: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), leaves: BTreeMap::new(), backward_ran: false }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, grad: None, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Raw gradient buffer of a node after `backward` (leaves included).
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Register a named parameter leaf. Gradient participation follows
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, name: &str, t: &Tensor) -> Result<NodeId> {
        if self.leaves.contains_key(name) {
            return Err(Error::Graph(format!("leaf `{name}` registered twice")));
        }
        let needs = t.requires_grad;
        let id = self.push(t.clone(), Op::Leaf, needs);
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    /// Register an anonymous constant input (no gradient).
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    fn check2d(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        let s = self.value(id).shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!("{what}: expected 2-D, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn finish(&mut self, value: Tensor, op: Op, needs: bool, what: &str) -> Result<NodeId> {
        value.check_finite(what)?;
        Ok(self.push(value, op, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.finish(t, Op::Add(a, b), needs, "add")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "mul: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.finish(t, Op::Mul(a, b), needs, "mul")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.finish(t, Op::Scale(a, c), needs, "scale")
    }

    /// C = A·B for 2-D operands.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.check2d(a, "matmul lhs")?;
        let (k2, n) = self.check2d(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!("matmul: inner {k} vs {k2}")));
        }
        let data = linalg::matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], data)?;
        let needs = self.needs(a) || self.needs(b);
        self.finish(t, Op::MatMul(a, b), needs, "matmul")
    }

    /// C = A·Bᵀ for 2-D operands (B stored row-major as [n×k]).
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.check2d(a, "matmul_nt lhs")?;
        let (n, k2) = self.check2d(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!("matmul_nt: inner {k} vs {k2}")));
        }
        let data = linalg::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], data)?;
        let needs = self.needs(a) || self.needs(b);
        self.finish(t, Op::MatMulNt(a, b), needs, "matmul_nt")
    }

    pub fn slice_rows(&mut self, x: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let (m, n) = self.check2d(x, "slice_rows")?;
        if lo > hi || hi > m {
            return Err(Error::ShapeMismatch(format!("slice_rows [{lo},{hi}) of {m} rows")));
        }
        let data = self.value(x).data()[lo * n..hi * n].to_vec();
        let t = Tensor::new(vec![hi - lo, n], data)?;
        let needs = self.needs(x);
        self.finish(t, Op::SliceRows(x, lo, hi), needs, "slice_rows")
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("concat_rows: empty".into()));
        }
        let (_, n) = self.check2d(parts[0], "concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.check2d(p, "concat_rows part")?;
            if c != n {
                return Err(Error::ShapeMismatch(format!("concat_rows: cols {c} vs {n}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, n], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.finish(t, Op::ConcatRows(parts.to_vec()), needs, "concat_rows")
    }

    pub fn slice_cols(&mut self, x: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let (m, n) = self.check2d(x, "slice_cols")?;
        if lo > hi || hi > n {
            return Err(Error::ShapeMismatch(format!("slice_cols [{lo},{hi}) of {n} cols")));
        }
        let src = self.value(x).data();
        let w = hi - lo;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + lo..i * n + hi]);
        }
        let t = Tensor::new(vec![m, w], data)?;
        let needs = self.needs(x);
        self.finish(t, Op::SliceCols(x, lo, hi), needs, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("concat_cols: empty".into()));
        }
        let (m, _) = self.check2d(parts[0], "concat_cols")?;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| self.check2d(p, "concat_cols part").map(|(r, c)| {
                debug_assert_eq!(r, m);
                c
            }))
            .collect::<Result<_>>()?;
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(Error::ShapeMismatch("concat_cols: row mismatch".into()));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let t = Tensor::new(vec![m, total], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.finish(t, Op::ConcatCols(parts.to_vec()), needs, "concat_cols")
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.check2d(x, "softmax")?;
        let src = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            let inv = 1.0 / sum;
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let t = Tensor::new(vec![m, n], data)?;
        let needs = self.needs(x);
        self.finish(t, Op::Softmax(x), needs, "softmax")
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = self.check2d(x, "layernorm")?;
        if self.value(gamma).shape() != [n] || self.value(beta).shape() != [n] {
            return Err(Error::ShapeMismatch("layernorm: gamma/beta must be [cols]".into()));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut data = vec![0.0; m * n];
        let mut means = vec![0.0; m];
        let mut rstds = vec![0.0; m];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            means[i] = mean;
            rstds[i] = rstd;
            let out = &mut data[i * n..(i + 1) * n];
            for j in 0..n {
                out[j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        let t = Tensor::new(vec![m, n], data)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.finish(
            t,
            Op::LayerNorm { x, gamma, beta, mean: means, rstd: rstds },
            needs,
            "layernorm",
        )
    }

    /// GELU in the tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| gelu_f(v)).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let needs = self.needs(x);
        self.finish(t, Op::Gelu(x), needs, "gelu")
    }

    /// Embedding lookup over a split table: ids below `base_size` read the
    /// base table, ids at or above it read the latent table (row 0 when the
    /// latent embedding is shared).
    pub fn embed(
        &mut self,
        base: NodeId,
        latent: NodeId,
        ids: &[usize],
        base_size: usize,
        shared: bool,
    ) -> Result<NodeId> {
        let (bv, d) = self.check2d(base, "embed base")?;
        let (lk, ld) = self.check2d(latent, "embed latent")?;
        if bv != base_size {
            return Err(Error::ShapeMismatch(format!(
                "embed: base table rows {bv} != base_size {base_size}"
            )));
        }
        if lk > 0 && ld != d {
            return Err(Error::ShapeMismatch("embed: latent width mismatch".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id < base_size {
                data.extend_from_slice(self.value(base).row(id));
            } else {
                let row = if shared { 0 } else { id - base_size };
                if row >= lk {
                    return Err(Error::ShapeMismatch(format!(
                        "embed: latent id {id} out of range (K={lk})"
                    )));
                }
                data.extend_from_slice(self.value(latent).row(row));
            }
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        let needs = self.needs(base) || self.needs(latent);
        self.finish(
            t,
            Op::Embed { base, latent, ids: ids.to_vec(), base_size, shared },
            needs,
            "embed",
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Returns a scalar node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (m, v) = self.check2d(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy: {m} rows vs {} targets",
                targets.len()
            )));
        }
        if m == 0 {
            return Err(Error::Graph("cross_entropy: empty target set".into()));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; m * v];
        let mut loss = 0.0;
        for i in 0..m {
            let t = targets[i];
            if t >= v {
                return Err(Error::ShapeMismatch(format!("cross_entropy: target {t} >= vocab {v}")));
            }
            let row = &src[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let prow = &mut probs[i * v..(i + 1) * v];
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = (x - max).exp();
                sum += *p;
            }
            let inv = 1.0 / sum;
            for p in prow.iter_mut() {
                *p *= inv;
            }
            loss -= row[t] - max - sum.ln();
        }
        loss /= m as f64;
        let t = Tensor::scalar(loss);
        let needs = self.needs(logits);
        self.finish(
            t,
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            needs,
            "cross_entropy",
        )
    }

    /// Replace entries where `blocked` is true with `value` (attention
    /// masking sets blocked logits to a large negative finite number so a
    /// subsequent softmax underflows them to exactly zero).
    pub fn masked_fill(&mut self, x: NodeId, blocked: &[bool], value: f64) -> Result<NodeId> {
        if blocked.len() != self.value(x).numel() {
            return Err(Error::ShapeMismatch(format!(
                "masked_fill: mask len {} vs {} elements",
                blocked.len(),
                self.value(x).numel()
            )));
        }
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(blocked)
            .map(|(&v, &b)| if b { value } else { v })
            .collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let needs = self.needs(x);
        self.finish(t, Op::MaskedFill { x, blocked: blocked.to_vec() }, needs, "masked_fill")
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(x).data().iter().sum();
        let t = Tensor::scalar(s);
        let needs = self.needs(x);
        self.finish(t, Op::SumAll(x), needs, "sum_all")
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every named
    /// leaf with `requires_grad`; leaves the loss does not reach get zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradMap> {
        if self.backward_ran {
            return Err(Error::Graph("backward called twice on one graph".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Graph("backward on empty graph".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Graph(format!(
                "backward requires scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_ran = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            self.apply_backward(i, &g);
            self.nodes[i].grad = Some(g);
        }

        let mut map = GradMap::new();
        for (name, &id) in &self.leaves {
            let node = &self.nodes[id.0];
            if !node.value.requires_grad {
                continue;
            }
            let grad = match &node.grad {
                Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone())?,
                None => Tensor::zeros(node.value.shape().to_vec()),
            };
            map.insert(name.clone(), grad);
        }
        Ok(map)
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut Vec<f64> {
        let numel = self.nodes[id.0].value.numel();
        self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; numel])
    }

    fn accumulate(&mut self, id: NodeId, contrib: &[f64]) {
        if !self.needs(id) {
            return;
        }
        let buf = self.grad_buf(id);
        for (o, &c) in buf.iter_mut().zip(contrib) {
            *o += c;
        }
    }

    fn apply_backward(&mut self, i: usize, g: &[f64]) {
        // The op is cheap to describe; clone out the metadata we need so the
        // borrow on self.nodes[i] ends before accumulation.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let contrib: Vec<f64> = self.nodes[b.0]
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&bv, &gv)| bv * gv)
                        .collect();
                    self.accumulate(a, &contrib);
                }
                if self.needs(b) {
                    let contrib: Vec<f64> = self.nodes[a.0]
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&av, &gv)| av * gv)
                        .collect();
                    self.accumulate(b, &contrib);
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                if self.needs(a) {
                    let contrib: Vec<f64> = g.iter().map(|&gv| gv * c).collect();
                    self.accumulate(a, &contrib);
                }
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let n = self.nodes[b.0].value.cols();
                if self.needs(a) {
                    let da = linalg::matmul_nt(g, self.nodes[b.0].value.data(), m, n, k);
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    let db = linalg::matmul_tn(self.nodes[a.0].value.data(), g, m, k, n);
                    self.accumulate(b, &db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let n = self.nodes[b.0].value.rows();
                if self.needs(a) {
                    // dA = dC·B : [m×n]·[n×k]
                    let da = linalg::matmul_nn(g, self.nodes[b.0].value.data(), m, n, k);
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    // dB = dCᵀ·A : [n×m]·[m×k]
                    let db = linalg::matmul_tn(g, self.nodes[a.0].value.data(), m, n, k);
                    self.accumulate(b, &db);
                }
            }
            Op::SliceRows(x, lo, hi) => {
                let (x, lo, hi) = (*x, *lo, *hi);
                if self.needs(x) {
                    let n = self.nodes[x.0].value.cols();
                    let numel = self.nodes[x.0].value.numel();
                    let mut contrib = vec![0.0; numel];
                    contrib[lo * n..hi * n].copy_from_slice(g);
                    self.accumulate(x, &contrib);
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let sz = self.nodes[p.0].value.numel();
                    if self.needs(p) {
                        let contrib = g[off..off + sz].to_vec();
                        self.accumulate(p, &contrib);
                    }
                    off += sz;
                }
            }
            Op::SliceCols(x, lo, hi) => {
                let (x, lo, hi) = (*x, *lo, *hi);
                if self.needs(x) {
                    let (m, n) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                    let w = hi - lo;
                    let mut contrib = vec![0.0; m * n];
                    for r in 0..m {
                        contrib[r * n + lo..r * n + hi].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    self.accumulate(x, &contrib);
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let m = self.nodes[parts[0].0].value.rows();
                let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.cols();
                    if self.needs(p) {
                        let mut contrib = vec![0.0; m * w];
                        for r in 0..m {
                            contrib[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        self.accumulate(p, &contrib);
                    }
                    off += w;
                }
            }
            Op::Softmax(x) => {
                let x = *x;
                if self.needs(x) {
                    let (m, n) = (self.nodes[i].value.rows(), self.nodes[i].value.cols());
                    let s = self.nodes[i].value.data();
                    let mut contrib = vec![0.0; m * n];
                    for r in 0..m {
                        let srow = &s[r * n..(r + 1) * n];
                        let grow = &g[r * n..(r + 1) * n];
                        let dot: f64 = srow.iter().zip(grow).map(|(&sv, &gv)| sv * gv).sum();
                        let crow = &mut contrib[r * n..(r + 1) * n];
                        for j in 0..n {
                            crow[j] = srow[j] * (grow[j] - dot);
                        }
                    }
                    self.accumulate(x, &contrib);
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (mean, rstd) = (mean.clone(), rstd.clone());
                let (m, n) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                let xv = self.nodes[x.0].value.data().to_vec();
                let gv = self.nodes[gamma.0].value.data().to_vec();
                if self.needs(beta) {
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for j in 0..n {
                            db[j] += g[r * n + j];
                        }
                    }
                    self.accumulate(beta, &db);
                }
                if self.needs(gamma) {
                    let mut dg = vec![0.0; n];
                    for r in 0..m {
                        for j in 0..n {
                            let xhat = (xv[r * n + j] - mean[r]) * rstd[r];
                            dg[j] += g[r * n + j] * xhat;
                        }
                    }
                    self.accumulate(gamma, &dg);
                }
                if self.needs(x) {
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        let mut sum_gg = 0.0;
                        let mut sum_gg_xhat = 0.0;
                        for j in 0..n {
                            let gg = g[r * n + j] * gv[j];
                            let xhat = (xv[r * n + j] - mean[r]) * rstd[r];
                            sum_gg += gg;
                            sum_gg_xhat += gg * xhat;
                        }
                        let inv_n = 1.0 / n as f64;
                        for j in 0..n {
                            let gg = g[r * n + j] * gv[j];
                            let xhat = (xv[r * n + j] - mean[r]) * rstd[r];
                            dx[r * n + j] =
                                rstd[r] * (gg - sum_gg * inv_n - xhat * sum_gg_xhat * inv_n);
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }
            Op::Gelu(x) => {
                let x = *x;
                if self.needs(x) {
                    let contrib: Vec<f64> = self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| gelu_df(v) * gv)
                        .collect();
                    self.accumulate(x, &contrib);
                }
            }
            Op::Embed { base, latent, ids, base_size, shared } => {
                let (base, latent) = (*base, *latent);
                let (ids, base_size, shared) = (ids.clone(), *base_size, *shared);
                let d = self.nodes[base.0].value.cols();
                if self.needs(base) {
                    let numel = self.nodes[base.0].value.numel();
                    let mut db = vec![0.0; numel];
                    for (r, &id) in ids.iter().enumerate() {
                        if id < base_size {
                            for j in 0..d {
                                db[id * d + j] += g[r * d + j];
                            }
                        }
                    }
                    self.accumulate(base, &db);
                }
                if self.needs(latent) {
                    let numel = self.nodes[latent.0].value.numel();
                    let mut dl = vec![0.0; numel];
                    for (r, &id) in ids.iter().enumerate() {
                        if id >= base_size {
                            let row = if shared { 0 } else { id - base_size };
                            for j in 0..d {
                                dl[row * d + j] += g[r * d + j];
                            }
                        }
                    }
                    self.accumulate(latent, &dl);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let logits = *logits;
                let targets = targets.clone();
                let probs = probs.clone();
                if self.needs(logits) {
                    let (m, v) = (
                        self.nodes[logits.0].value.rows(),
                        self.nodes[logits.0].value.cols(),
                    );
                    let scale = g[0] / m as f64;
                    let mut dl = probs;
                    for (r, &t) in targets.iter().enumerate() {
                        dl[r * v + t] -= 1.0;
                    }
                    for d in dl.iter_mut() {
                        *d *= scale;
                    }
                    self.accumulate(logits, &dl);
                }
            }
            Op::MaskedFill { x, blocked } => {
                let x = *x;
                let blocked = blocked.clone();
                if self.needs(x) {
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(&blocked)
                        .map(|(&gv, &b)| if b { 0.0 } else { gv })
                        .collect();
                    self.accumulate(x, &contrib);
                }
            }
            Op::SumAll(x) => {
                let x = *x;
                if self.needs(x) {
                    let numel = self.nodes[x.0].value.numel();
                    let contrib = vec![g[0]; numel];
                    self.accumulate(x, &contrib);
                }
            }
        }
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_f(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_df(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut g = Graph::new();
        let x = g.input(t(vec![1, 4], vec![0.0; 4]));
        let s = g.softmax(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = t(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let a = t(vec![3, 3], vec![2.0, -1.0, 0.5, 3.0, 4.0, -2.0, 0.0, 1.0, 7.0]);
        let i = g.input(eye);
        let an = g.input(a.clone());
        let out = g.matmul(i, an).unwrap();
        assert!(g.value(out).bit_eq(&a));
    }

    #[test]
    fn layernorm_zero_mean_unit_variance() {
        let mut g = Graph::new();
        let x = g.input(t(vec![1, 3], vec![1.0, 2.0, 3.0]));
        let gamma = g.input(t(vec![3], vec![1.0; 3]));
        let beta = g.input(t(vec![3], vec![0.0; 3]));
        let y = g.layernorm(x, gamma, beta, 1e-5).unwrap();
        let d = g.value(y).data();
        let mean = d.iter().sum::<f64>() / 3.0;
        let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-9, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf("x", &t(vec![1, 3], vec![1.0, 2.0, 3.0]).with_grad()).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["x"].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_unreachable_leaf_gets_zero() {
        let mut g = Graph::new();
        let x = g.leaf("x", &t(vec![1, 2], vec![1.0, 2.0]).with_grad()).unwrap();
        let _unused = g.leaf("p", &t(vec![1, 2], vec![5.0, 6.0]).with_grad()).unwrap();
        let loss = g.sum_all(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["p"].data(), &[0.0, 0.0]);
        assert_eq!(grads["x"].data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf("x", &t(vec![1, 2], vec![1.0, 2.0]).with_grad()).unwrap();
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert!(g.backward(loss).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf("x", &t(vec![1, 2], vec![1.0, 2.0]).with_grad()).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn masked_fill_all_false_is_identity() {
        let mut g = Graph::new();
        let x = g.input(t(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]));
        let y = g.masked_fill(x, &[false; 4], -1e30).unwrap();
        assert!(g.value(y).bit_eq(g.value(x)));
    }

    #[test]
    fn masked_row_softmax_is_exactly_zero_on_blocked() {
        let mut g = Graph::new();
        let x = g.input(t(vec![1, 4], vec![0.3, -0.2, 1.5, 0.7]));
        let m = g.masked_fill(x, &[false, true, false, true], -1e30).unwrap();
        let s = g.softmax(m).unwrap();
        let d = g.value(s).data();
        assert_eq!(d[1], 0.0);
        assert_eq!(d[3], 0.0);
        assert!((d[0] + d[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_vocab() {
        let mut g = Graph::new();
        let logits = g.input(t(vec![2, 4], vec![0.0; 8]));
        let loss = g.cross_entropy(logits, &[1, 3]).unwrap();
        assert!((g.value(loss).item() - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn constant_loss_has_zero_grad() {
        let mut g = Graph::new();
        let p = g.leaf("p", &t(vec![1, 2], vec![1.0, 2.0]).with_grad()).unwrap();
        let _ = p;
        let c = g.input(t(vec![1, 1], vec![7.0]));
        let loss = g.sum_all(c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["p"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(t(vec![1, 2], vec![1e308, 1e308]));
        let y = g.add(x, x);
        assert!(matches!(y, Err(Error::NonFinite(_))));
    }

    #[test]
    fn duplicate_leaf_name_rejected() {
        let mut g = Graph::new();
        g.leaf("w", &t(vec![1], vec![0.0])).unwrap();
        assert!(g.leaf("w", &t(vec![1], vec![0.0])).is_err());
    }
}

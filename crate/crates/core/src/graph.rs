//! Reverse-mode autodiff over dense f64 tensors.
//!
//! A [`Graph`] owns every tensor produced during a forward pass. Ops append
//! nodes, so node ids are already in topological order and [`Graph::backward`]
//! is a single reverse sweep. In debug/test builds every op checks its output
//! for NaN/Inf and fails immediately; release builds skip the check.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mask::AttnMask;
use crate::tensor::{self, Tensor};
use crate::transducer;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    /// Broadcast a 1-D row over every row of a matrix.
    AddRow { m: NodeId, row: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    AddScalar { a: NodeId },
    Sigmoid { a: NodeId },
    Tanh { a: NodeId },
    Relu { a: NodeId },
    Embed { table: NodeId, ids: Vec<usize> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, means: Vec<f64>, rstds: Vec<f64> },
    LogSoftmax { a: NodeId },
    MaskedSoftmax { a: NodeId, mask: Arc<AttnMask> },
    Sum { a: NodeId },
    SliceRows { a: NodeId, r0: usize },
    SliceCols { a: NodeId, c0: usize },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    /// out[t*p + u] = a[t] + b[u], both j columns wide.
    PairSum { a: NodeId, b: NodeId },
    /// Transducer NLL of a (T*(U+1))×(V+1) log-prob matrix; the gradient
    /// w.r.t. the log-probs is cached at forward time.
    TransducerNll { logp: NodeId, grad: Vec<f64> },
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient buffer of a node; zeros until [`Graph::backward`] reaches it.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        #[cfg(debug_assertions)]
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "op output (node {}, shape {:?})",
                self.nodes.len(),
                value.shape
            )));
        }
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node { value, grad, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node {
            value,
            grad,
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = (self.value(a).rows(), self.value(a).cols());
        let (br, bc) = (self.value(b).rows(), self.value(b).cols());
        if ac != br {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: {:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        let c = tensor::matmul(&self.value(a).values, &self.value(b).values, ar, ac, bc);
        self.push(Tensor::new(vec![ar, bc], c)?, Op::Matmul { a, b })
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = (self.value(a).rows(), self.value(a).cols());
        let t = tensor::transpose(&self.value(a).values, r, c);
        self.push(Tensor::new(vec![c, r], t)?, Op::Transpose { a })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::Shape(format!(
                "add shapes differ: {:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        let vals: Vec<f64> = self
            .value(a)
            .values
            .iter()
            .zip(&self.value(b).values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, vals)?, Op::Add { a, b })
    }

    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> Result<NodeId> {
        let cols = self.value(m).cols();
        if self.value(row).len() != cols {
            return Err(Error::Shape(format!(
                "add_row: row {:?} vs matrix {:?}",
                self.value(row).shape,
                self.value(m).shape
            )));
        }
        let rows = self.value(m).rows();
        let mut vals = self.value(m).values.clone();
        for r in 0..rows {
            for j in 0..cols {
                vals[r * cols + j] += self.value(row).values[j];
            }
        }
        let shape = self.value(m).shape.clone();
        self.push(Tensor::new(shape, vals)?, Op::AddRow { m, row })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::Shape(format!(
                "mul shapes differ: {:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        let vals: Vec<f64> = self
            .value(a)
            .values
            .iter()
            .zip(&self.value(b).values)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, vals)?, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let vals: Vec<f64> = self.value(a).values.iter().map(|x| x * c).collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, vals)?, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let vals: Vec<f64> = self.value(a).values.iter().map(|x| x + c).collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, vals)?, Op::AddScalar { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let vals: Vec<f64> = self.value(a).values.iter().map(|&x| tensor::sigmoid(x)).collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, vals)?, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let vals: Vec<f64> = self.value(a).values.iter().map(|x| x.tanh()).collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, vals)?, Op::Tanh { a })
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let vals: Vec<f64> = self.value(a).values.iter().map(|x| x.max(0.0)).collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, vals)?, Op::Relu { a })
    }

    /// Gather rows of `table` by token id.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, cols) = (self.value(table).rows(), self.value(table).cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "embedding id {bad} out of range for table with {rows} rows"
            )));
        }
        let mut vals = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            vals.extend_from_slice(self.value(table).row(i));
        }
        self.push(
            Tensor::new(vec![ids.len(), cols], vals)?,
            Op::Embed { table, ids: ids.to_vec() },
        )
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (rows, cols) = (self.value(x).rows(), self.value(x).cols());
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::Shape(format!(
                "layer_norm: gain {:?} / bias {:?} vs last extent {cols}",
                self.value(gain).shape,
                self.value(bias).shape
            )));
        }
        let (vals, means, rstds) = tensor::layer_norm_rows(
            &self.value(x).values,
            &self.value(gain).values,
            &self.value(bias).values,
            rows,
            cols,
            eps,
        );
        let shape = self.value(x).shape.clone();
        self.push(
            Tensor::new(shape, vals)?,
            Op::LayerNorm { x, gain, bias, means, rstds },
        )
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (rows, cols) = (self.value(a).rows(), self.value(a).cols());
        let vals = tensor::log_softmax_rows(&self.value(a).values, rows, cols);
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, vals)?, Op::LogSoftmax { a })
    }

    /// Softmax along rows restricted to the mask's allowed keys.
    pub fn masked_softmax(&mut self, a: NodeId, mask: Arc<AttnMask>) -> Result<NodeId> {
        let (rows, cols) = (self.value(a).rows(), self.value(a).cols());
        if mask.queries() != rows || mask.keys() != cols {
            return Err(Error::Shape(format!(
                "masked_softmax: scores {:?} vs mask {}x{}",
                self.value(a).shape,
                mask.queries(),
                mask.keys()
            )));
        }
        let vals = tensor::masked_softmax_rows(&self.value(a).values, rows, cols, |q, k| {
            mask.allowed(q, k)
        });
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, vals)?, Op::MaskedSoftmax { a, mask })
    }

    /// Full reduction to a scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).values.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    pub fn slice_rows(&mut self, a: NodeId, r0: usize, r1: usize) -> Result<NodeId> {
        let (rows, cols) = (self.value(a).rows(), self.value(a).cols());
        if r0 >= r1 || r1 > rows {
            return Err(Error::Shape(format!(
                "slice_rows {r0}..{r1} out of {rows} rows"
            )));
        }
        let vals = self.value(a).values[r0 * cols..r1 * cols].to_vec();
        self.push(Tensor::new(vec![r1 - r0, cols], vals)?, Op::SliceRows { a, r0 })
    }

    pub fn slice_cols(&mut self, a: NodeId, c0: usize, c1: usize) -> Result<NodeId> {
        let (rows, cols) = (self.value(a).rows(), self.value(a).cols());
        if c0 >= c1 || c1 > cols {
            return Err(Error::Shape(format!(
                "slice_cols {c0}..{c1} out of {cols} cols"
            )));
        }
        let mut vals = Vec::with_capacity(rows * (c1 - c0));
        for r in 0..rows {
            vals.extend_from_slice(&self.value(a).values[r * cols + c0..r * cols + c1]);
        }
        self.push(Tensor::new(vec![rows, c1 - c0], vals)?, Op::SliceCols { a, c0 })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of nothing".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut vals = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.value(p).cols() != cols {
                return Err(Error::Shape(format!(
                    "concat_rows column mismatch: {} vs {}",
                    self.value(p).cols(),
                    cols
                )));
            }
            rows += self.value(p).rows();
            vals.extend_from_slice(&self.value(p).values);
        }
        self.push(
            Tensor::new(vec![rows, cols], vals)?,
            Op::ConcatRows { parts: parts.to_vec() },
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of nothing".into()));
        }
        let rows = self.value(parts[0]).rows();
        let total_cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut vals = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for &p in parts {
                if self.value(p).rows() != rows {
                    return Err(Error::Shape(format!(
                        "concat_cols row mismatch: {} vs {}",
                        self.value(p).rows(),
                        rows
                    )));
                }
                vals.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(
            Tensor::new(vec![rows, total_cols], vals)?,
            Op::ConcatCols { parts: parts.to_vec() },
        )
    }

    /// Pairwise row sum: a is m×j, b is p×j, out row t*p+u is a[t] + b[u].
    pub fn pair_sum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, j) = (self.value(a).rows(), self.value(a).cols());
        let (p, jb) = (self.value(b).rows(), self.value(b).cols());
        if j != jb {
            return Err(Error::Shape(format!(
                "pair_sum column mismatch: {:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        let mut vals = Vec::with_capacity(m * p * j);
        for t in 0..m {
            let at = self.value(a).row(t);
            for u in 0..p {
                let bu = self.value(b).row(u);
                for c in 0..j {
                    vals.push(at[c] + bu[c]);
                }
            }
        }
        self.push(Tensor::new(vec![m * p, j], vals)?, Op::PairSum { a, b })
    }

    /// Transducer negative log-likelihood over a lattice of log-probs.
    ///
    /// `logp` must be (T*(U+1))×(V+1) with row t*(U+1)+u holding the output
    /// distribution at lattice node (t, u). `target` holds the U non-blank
    /// token ids.
    pub fn transducer_nll(&mut self, logp: NodeId, t_len: usize, target: &[usize]) -> Result<NodeId> {
        let u_len = target.len();
        let rows = self.value(logp).rows();
        let vocab_plus = self.value(logp).cols();
        if rows != t_len * (u_len + 1) {
            return Err(Error::Shape(format!(
                "transducer_nll: {rows} rows != T({t_len})*(U+1)({})",
                u_len + 1
            )));
        }
        let (nll, grad) =
            transducer::nll_with_grad(&self.value(logp).values, t_len, u_len, vocab_plus, target)?;
        self.push(Tensor::scalar(nll), Op::TransducerNll { logp, grad })
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Leaves not reachable from the loss
    /// keep their zero gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..=loss.0).rev() {
            // Split off the current node so its inputs can be mutated.
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if node.grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            step_backward(node, before);
        }
        Ok(())
    }
}

/// Propagate one node's gradient into its inputs (all of which precede it).
fn step_backward(node: &Node, before: &mut [Node]) {
    let go = &node.grad;
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, k) = (before[a.0].value.rows(), before[a.0].value.cols());
            let n = before[b.0].value.cols();
            // dA += dC · Bᵀ
            let da = tensor::matmul_nt(go, &before[b.0].value.values, m, n, k);
            acc(&mut before[a.0].grad, &da);
            // dB += Aᵀ · dC
            let at = tensor::transpose(&before[a.0].value.values, m, k);
            let db = tensor::matmul(&at, go, k, m, n);
            acc(&mut before[b.0].grad, &db);
        }
        Op::Transpose { a } => {
            let (r, c) = (out.rows(), out.cols());
            let da = tensor::transpose(go, r, c);
            acc(&mut before[a.0].grad, &da);
        }
        Op::Add { a, b } => {
            acc(&mut before[a.0].grad, go);
            acc(&mut before[b.0].grad, go);
        }
        Op::AddRow { m, row } => {
            acc(&mut before[m.0].grad, go);
            let cols = before[row.0].value.len();
            let rows = out.rows();
            for r in 0..rows {
                for j in 0..cols {
                    before[row.0].grad[j] += go[r * cols + j];
                }
            }
        }
        Op::Mul { a, b } => {
            for (i, &g) in go.iter().enumerate() {
                before[a.0].grad[i] += g * before[b.0].value.values[i];
            }
            for (i, &g) in go.iter().enumerate() {
                before[b.0].grad[i] += g * before[a.0].value.values[i];
            }
        }
        Op::Scale { a, c } => {
            for (i, &g) in go.iter().enumerate() {
                before[a.0].grad[i] += g * c;
            }
        }
        Op::AddScalar { a } => acc(&mut before[a.0].grad, go),
        Op::Sigmoid { a } => {
            for (i, &g) in go.iter().enumerate() {
                let y = out.values[i];
                before[a.0].grad[i] += g * y * (1.0 - y);
            }
        }
        Op::Tanh { a } => {
            for (i, &g) in go.iter().enumerate() {
                let y = out.values[i];
                before[a.0].grad[i] += g * (1.0 - y * y);
            }
        }
        Op::Relu { a } => {
            for (i, &g) in go.iter().enumerate() {
                if before[a.0].value.values[i] > 0.0 {
                    before[a.0].grad[i] += g;
                }
            }
        }
        Op::Embed { table, ids } => {
            let cols = out.cols();
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..cols {
                    before[table.0].grad[id * cols + j] += go[r * cols + j];
                }
            }
        }
        Op::LayerNorm { x, gain, bias, means, rstds } => {
            let (rows, cols) = (out.rows(), out.cols());
            let xv = &before[x.0].value.values;
            let gv = &before[gain.0].value.values;
            for r in 0..rows {
                let (mean, rstd) = (means[r], rstds[r]);
                let dy = &go[r * cols..(r + 1) * cols];
                let xr = &xv[r * cols..(r + 1) * cols];
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for j in 0..cols {
                    let xhat = (xr[j] - mean) * rstd;
                    let dxhat = dy[j] * gv[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    before[gain.0].grad[j] += dy[j] * xhat;
                    before[bias.0].grad[j] += dy[j];
                }
                let n = cols as f64;
                for j in 0..cols {
                    let xhat = (xr[j] - mean) * rstd;
                    let dxhat = dy[j] * gv[j];
                    before[x.0].grad[r * cols + j] +=
                        rstd * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                }
            }
        }
        Op::LogSoftmax { a } => {
            let (rows, cols) = (out.rows(), out.cols());
            for r in 0..rows {
                let dy = &go[r * cols..(r + 1) * cols];
                let y = &out.values[r * cols..(r + 1) * cols];
                let dsum: f64 = dy.iter().sum();
                for j in 0..cols {
                    before[a.0].grad[r * cols + j] += dy[j] - y[j].exp() * dsum;
                }
            }
        }
        Op::MaskedSoftmax { a, mask } => {
            let (rows, cols) = (out.rows(), out.cols());
            for r in 0..rows {
                let dy = &go[r * cols..(r + 1) * cols];
                let p = &out.values[r * cols..(r + 1) * cols];
                let mut dot = 0.0;
                for k in 0..cols {
                    if mask.allowed(r, k) {
                        dot += dy[k] * p[k];
                    }
                }
                for k in 0..cols {
                    if mask.allowed(r, k) {
                        before[a.0].grad[r * cols + k] += p[k] * (dy[k] - dot);
                    }
                }
            }
        }
        Op::Sum { a } => {
            let g = go[0];
            for d in before[a.0].grad.iter_mut() {
                *d += g;
            }
        }
        Op::SliceRows { a, r0 } => {
            let cols = out.cols();
            let offset = r0 * cols;
            for (i, &g) in go.iter().enumerate() {
                before[a.0].grad[offset + i] += g;
            }
        }
        Op::SliceCols { a, c0 } => {
            let (rows, w) = (out.rows(), out.cols());
            let full_cols = before[a.0].value.cols();
            for r in 0..rows {
                for j in 0..w {
                    before[a.0].grad[r * full_cols + c0 + j] += go[r * w + j];
                }
            }
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let n = before[p.0].value.len();
                acc(&mut before[p.0].grad, &go[offset..offset + n]);
                offset += n;
            }
        }
        Op::ConcatCols { parts } => {
            let rows = out.rows();
            let total = out.cols();
            for r in 0..rows {
                let mut offset = 0;
                for &p in parts {
                    let w = before[p.0].value.cols();
                    for j in 0..w {
                        before[p.0].grad[r * w + j] += go[r * total + offset + j];
                    }
                    offset += w;
                }
            }
        }
        Op::PairSum { a, b } => {
            let (m, j) = (before[a.0].value.rows(), before[a.0].value.cols());
            let p = before[b.0].value.rows();
            for t in 0..m {
                for u in 0..p {
                    let row = &go[(t * p + u) * j..(t * p + u + 1) * j];
                    for c in 0..j {
                        before[a.0].grad[t * j + c] += row[c];
                    }
                    for c in 0..j {
                        before[b.0].grad[u * j + c] += row[c];
                    }
                }
            }
        }
        Op::TransducerNll { logp, grad } => {
            let g = go[0];
            for (i, &d) in grad.iter().enumerate() {
                before[logp.0].grad[i] += g * d;
            }
        }
    }
}

fn acc(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

// ── finite-difference checking ───────────────────────────────────────

/// Relative error with an absolute fallback for near-zero pairs.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale > 1e-4 {
        diff / scale
    } else {
        diff
    }
}

/// Checks analytic gradients of a scalar-valued builder against central
/// finite differences at step `h`. The builder receives leaf ids bound to
/// `inputs` in order and must return the loss node. Returns the worst
/// relative error over every input element.
pub fn grad_check<F>(inputs: &[Tensor], build: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad(id).to_vec()).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss).values[0])
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for ti in 0..inputs.len() {
        for ei in 0..inputs[ti].len() {
            let orig = work[ti].values[ei];
            work[ti].values[ei] = orig + h;
            let up = eval(&work)?;
            work[ti].values[ei] = orig - h;
            let down = eval(&work)?;
            work[ti].values[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic[ti][ei], numeric));
        }
    }
    Ok(worst)
}

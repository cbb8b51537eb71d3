//! Reverse-mode autodiff over a flat operation tape.
//!
//! Forward calls append nodes and return `NodeId` handles; `backward` walks
//! the tape once in reverse, accumulating gradients additively so fan-out
//! just works. The tape owns all intermediate values, which keeps parameter
//! tensors free of graph bookkeeping: leaves copy values in, and gradients
//! are copied back out with `accumulate_into` after the backward pass.

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, softmax_into, stable_sigmoid};
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    Relu { a: NodeId },
    Sigmoid { a: NodeId },
    Log { a: NodeId },
    Exp { a: NodeId },
    Square { a: NodeId },
    Sum { a: NodeId },
    SumAxis { a: NodeId, axis: usize },
    Mean { a: NodeId },
    MeanAxis { a: NodeId, axis: usize },
    Max { a: NodeId },
    MaxAxis { a: NodeId, axis: usize },
    SliceCols { a: NodeId, start: usize, end: usize },
    ConcatCols { parts: Vec<NodeId> },
    SoftmaxCe { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
    SoftmaxCeSoft { logits: NodeId, targets: NodeId, probs: Vec<f64> },
    BceLogits {
        logits: NodeId,
        targets: NodeId,
        weights: Option<Vec<f64>>,
        norm: f64,
        sig: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// Scalar value of a rank-0 or single-element node.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let n = &self.nodes[id.0];
        if n.values.len() != 1 {
            return Err(Error::NonScalarLoss { len: n.values.len() });
        }
        Ok(n.values[0])
    }

    /// Gradient of the last backward pass, None for nodes outside the
    /// differentiated subgraph.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Values of every node in push order, for graph inspection.
    pub fn node_values(&self) -> impl Iterator<Item = &[f64]> {
        self.nodes.iter().map(|n| n.values.as_slice())
    }

    /// Copies the node's value out as a tensor (detached, no grad).
    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(n.shape.clone(), n.values.clone()).expect("node shape is consistent")
    }

    /// Adds the node's gradient into the tensor's grad slot. A node that
    /// received no gradient contributes nothing.
    pub fn accumulate_into(&self, id: NodeId, target: &mut Tensor) -> Result<()> {
        let n = &self.nodes[id.0];
        if n.shape != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_into",
                left: n.shape.clone(),
                right: target.shape().to_vec(),
            });
        }
        if let Some(g) = &n.grad {
            target.accumulate_grad(g);
        }
        Ok(())
    }

    // ── graph construction ──

    pub fn leaf(&mut self, t: &Tensor) -> Result<NodeId> {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Leaf that never receives gradient, built from raw values.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<NodeId> {
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(Error::ShapeMismatch {
                op: "constant",
                left: shape,
                right: vec![values.len()],
            });
        }
        self.push(shape, values, false, Op::Leaf)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.push(vec![], vec![v], false, Op::Leaf)
            .expect("scalar leaf")
    }

    /// 2-d matrix product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out = mm_nn(self.values(a), self.values(b), m, ka, n);
        self.push(vec![m, n], out, self.any_grad(&[a, b]), Op::MatMul { a, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let out = zip_vals(self.values(a), self.values(b), |x, y| x + y);
        self.push(
            self.shape(a).to_vec(),
            out,
            self.any_grad(&[a, b]),
            Op::Add { a, b },
        )
    }

    /// Adds a rank-1 bias over the last axis of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(bias).to_vec();
        let inner = *ashape.last().unwrap_or(&0);
        if bshape.len() != 1 || bshape[0] != inner {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: ashape,
                right: bshape,
            });
        }
        let bv = self.values(bias);
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % inner])
            .collect();
        self.push(ashape, out, self.any_grad(&[a, bias]), Op::AddBias { a, bias })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let out = zip_vals(self.values(a), self.values(b), |x, y| x - y);
        self.push(
            self.shape(a).to_vec(),
            out,
            self.any_grad(&[a, b]),
            Op::Sub { a, b },
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let out = zip_vals(self.values(a), self.values(b), |x, y| x * y);
        self.push(
            self.shape(a).to_vec(),
            out,
            self.any_grad(&[a, b]),
            Op::Mul { a, b },
        )
    }

    /// Multiplies every element by a compile-time constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.values(a).iter().map(|x| x * c).collect();
        self.push(
            self.shape(a).to_vec(),
            out,
            self.needs(a),
            Op::Scale { a, c },
        )
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.values(a).iter().map(|x| x.max(0.0)).collect();
        self.push(self.shape(a).to_vec(), out, self.needs(a), Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.values(a).iter().map(|x| stable_sigmoid(*x)).collect();
        self.push(self.shape(a).to_vec(), out, self.needs(a), Op::Sigmoid { a })
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        for &v in self.values(a) {
            if v <= 0.0 {
                return Err(Error::LogDomain { value: v });
            }
        }
        let out: Vec<f64> = self.values(a).iter().map(|x| x.ln()).collect();
        self.push(self.shape(a).to_vec(), out, self.needs(a), Op::Log { a })
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.values(a).iter().map(|x| x.exp()).collect();
        self.push(self.shape(a).to_vec(), out, self.needs(a), Op::Exp { a })
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.values(a).iter().map(|x| x * x).collect();
        self.push(self.shape(a).to_vec(), out, self.needs(a), Op::Square { a })
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.values(a).iter().sum();
        self.push(vec![], vec![s], self.needs(a), Op::Sum { a })
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis(a, axis, ReduceKind::Sum)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.values(a).len().max(1);
        let s: f64 = self.values(a).iter().sum::<f64>() / n as f64;
        self.push(vec![], vec![s], self.needs(a), Op::Mean { a })
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis(a, axis, ReduceKind::Mean)
    }

    /// Maximum over all elements; gradient routes to the lowest-index max.
    pub fn max(&mut self, a: NodeId) -> Result<NodeId> {
        let vals = self.values(a);
        debug_assert!(!vals.is_empty());
        let m = vals[argmax(vals)];
        self.push(vec![], vec![m], self.needs(a), Op::Max { a })
    }

    pub fn max_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis(a, axis, ReduceKind::Max)
    }

    /// Columns `start..end` of a 2-d node.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (rows, cols) = self.dims2(a, "slice_cols")?;
        if start >= end || end > cols {
            return Err(Error::InvalidSlice { start, end, cols });
        }
        let width = end - start;
        let vals = self.values(a);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&vals[r * cols + start..r * cols + end]);
        }
        self.push(
            vec![rows, width],
            out,
            self.needs(a),
            Op::SliceCols { a, start, end },
        )
    }

    /// Concatenates 2-d nodes along the column axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidSlice { start: 0, end: 0, cols: 0 });
        }
        let (rows, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let vals = self.values(p);
                out.extend_from_slice(&vals[r * w..(r + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            vec![rows, total],
            out,
            needs,
            Op::ConcatCols { parts: parts.to_vec() },
        )
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    /// Stable: goes through log-sum-exp, never exp of raw logits.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.dims2(logits, "softmax_cross_entropy")?;
        if labels.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: vec![rows, cols],
                right: vec![labels.len()],
            });
        }
        for &y in labels {
            if y >= cols {
                return Err(Error::LabelOutOfRange { label: y, limit: cols });
            }
        }
        let vals = self.values(logits);
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &vals[r * cols..(r + 1) * cols];
            loss += log_sum_exp(row) - row[labels[r]];
            softmax_into(row, &mut probs[r * cols..(r + 1) * cols]);
        }
        loss /= rows as f64;
        self.push(
            vec![],
            vec![loss],
            self.needs(logits),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Mean cross-entropy of row-wise softmax against target distributions
    /// (rows of `targets`, same shape as `logits`).
    pub fn softmax_cross_entropy_soft(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.dims2(logits, "softmax_cross_entropy_soft")?;
        self.same_shape(logits, targets, "softmax_cross_entropy_soft")?;
        let zv = self.values(logits);
        let tv = self.values(targets);
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &zv[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            for c in 0..cols {
                loss += tv[r * cols + c] * (lse - row[c]);
            }
            softmax_into(row, &mut probs[r * cols..(r + 1) * cols]);
        }
        loss /= rows as f64;
        let needs = self.any_grad(&[logits, targets]);
        self.push(
            vec![],
            vec![loss],
            needs,
            Op::SoftmaxCeSoft { logits, targets, probs },
        )
    }

    /// Weighted binary cross-entropy with logits, summed then divided by
    /// `norm`. `weights` of None means all ones. Targets may be soft.
    pub fn bce_with_logits(
        &mut self,
        logits: NodeId,
        targets: NodeId,
        weights: Option<Vec<f64>>,
        norm: f64,
    ) -> Result<NodeId> {
        self.same_shape(logits, targets, "bce_with_logits")?;
        let n = self.values(logits).len();
        if let Some(w) = &weights {
            if w.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "bce_with_logits",
                    left: vec![n],
                    right: vec![w.len()],
                });
            }
        }
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::NonFinite {
                context: format!("bce normalizer {norm}"),
            });
        }
        let zv = self.values(logits);
        let tv = self.values(targets);
        let mut sig = vec![0.0; n];
        let mut loss = 0.0;
        for i in 0..n {
            let w = weights.as_ref().map_or(1.0, |w| w[i]);
            loss += w * crate::numerics::bce_with_logits(zv[i], tv[i]);
            sig[i] = stable_sigmoid(zv[i]);
        }
        loss /= norm;
        let needs = self.any_grad(&[logits, targets]);
        self.push(
            vec![],
            vec![loss],
            needs,
            Op::BceLogits {
                logits,
                targets,
                weights,
                norm,
                sig,
            },
        )
    }

    // ── backward ──

    /// Reverse pass from a scalar loss. Exactly one backward per tape; a
    /// second call is an error, as is recording new ops afterwards.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::BackwardConsumed);
        }
        self.consumed = true;
        let ln = &self.nodes[loss.0];
        if ln.values.len() != 1 {
            return Err(Error::NonScalarLoss { len: ln.values.len() });
        }
        if !ln.needs_grad {
            // All-constant graph: nothing to differentiate.
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let g = self.nodes[i].grad.clone().expect("grad present");
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    if self.needs(a) {
                        let da = mm_nt(&g, &self.nodes[b.0].values, m, n, k);
                        self.add_grad(a, &da);
                    }
                    if self.needs(b) {
                        let db = mm_tn(&self.nodes[a.0].values, &g, m, k, n);
                        self.add_grad(b, &db);
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(a) {
                        self.add_grad(a, &g);
                    }
                    if self.needs(b) {
                        self.add_grad(b, &g);
                    }
                }
                Op::AddBias { a, bias } => {
                    if self.needs(a) {
                        self.add_grad(a, &g);
                    }
                    if self.needs(bias) {
                        let inner = self.nodes[bias.0].values.len();
                        let mut db = vec![0.0; inner];
                        for (i, gi) in g.iter().enumerate() {
                            db[i % inner] += gi;
                        }
                        self.add_grad(bias, &db);
                    }
                }
                Op::Sub { a, b } => {
                    if self.needs(a) {
                        self.add_grad(a, &g);
                    }
                    if self.needs(b) {
                        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                        self.add_grad(b, &neg);
                    }
                }
                Op::Mul { a, b } => {
                    if self.needs(a) {
                        let da = zip_vals(&g, &self.nodes[b.0].values, |x, y| x * y);
                        self.add_grad(a, &da);
                    }
                    if self.needs(b) {
                        let db = zip_vals(&g, &self.nodes[a.0].values, |x, y| x * y);
                        self.add_grad(b, &db);
                    }
                }
                Op::Scale { a, c } => {
                    if self.needs(a) {
                        let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                        self.add_grad(a, &da);
                    }
                }
                Op::Relu { a } => {
                    if self.needs(a) {
                        let da = zip_vals(&g, &self.nodes[a.0].values, |gi, x| {
                            if x > 0.0 {
                                gi
                            } else {
                                0.0
                            }
                        });
                        self.add_grad(a, &da);
                    }
                }
                Op::Sigmoid { a } => {
                    if self.needs(a) {
                        let da = zip_vals(&g, &self.nodes[i].values, |gi, s| gi * s * (1.0 - s));
                        self.add_grad(a, &da);
                    }
                }
                Op::Log { a } => {
                    if self.needs(a) {
                        let da = zip_vals(&g, &self.nodes[a.0].values, |gi, x| gi / x);
                        self.add_grad(a, &da);
                    }
                }
                Op::Exp { a } => {
                    if self.needs(a) {
                        let da = zip_vals(&g, &self.nodes[i].values, |gi, e| gi * e);
                        self.add_grad(a, &da);
                    }
                }
                Op::Square { a } => {
                    if self.needs(a) {
                        let da = zip_vals(&g, &self.nodes[a.0].values, |gi, x| gi * 2.0 * x);
                        self.add_grad(a, &da);
                    }
                }
                Op::Sum { a } => {
                    if self.needs(a) {
                        let da = vec![g[0]; self.nodes[a.0].values.len()];
                        self.add_grad(a, &da);
                    }
                }
                Op::Mean { a } => {
                    if self.needs(a) {
                        let n = self.nodes[a.0].values.len().max(1);
                        let da = vec![g[0] / n as f64; self.nodes[a.0].values.len()];
                        self.add_grad(a, &da);
                    }
                }
                Op::Max { a } => {
                    if self.needs(a) {
                        let vals = &self.nodes[a.0].values;
                        let mut da = vec![0.0; vals.len()];
                        da[argmax(vals)] = g[0];
                        self.add_grad(a, &da);
                    }
                }
                Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } | Op::MaxAxis { a, axis } => {
                    if self.needs(a) {
                        let da = self.reduce_axis_backward(&op, a, axis, &g);
                        self.add_grad(a, &da);
                    }
                }
                Op::SliceCols { a, start, end } => {
                    if self.needs(a) {
                        let cols = self.nodes[a.0].shape[1];
                        let rows = self.nodes[a.0].shape[0];
                        let width = end - start;
                        let mut da = vec![0.0; rows * cols];
                        for r in 0..rows {
                            for c in 0..width {
                                da[r * cols + start + c] = g[r * width + c];
                            }
                        }
                        self.add_grad(a, &da);
                    }
                }
                Op::ConcatCols { parts } => {
                    let rows = self.nodes[i].shape[0];
                    let total = self.nodes[i].shape[1];
                    let mut offset = 0;
                    for &p in &parts {
                        let w = self.nodes[p.0].shape[1];
                        if self.needs(p) {
                            let mut dp = vec![0.0; rows * w];
                            for r in 0..rows {
                                dp[r * w..(r + 1) * w]
                                    .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                            }
                            self.add_grad(p, &dp);
                        }
                        offset += w;
                    }
                }
                Op::SoftmaxCe { logits, labels, probs } => {
                    if self.needs(logits) {
                        let rows = labels.len();
                        let cols = self.nodes[logits.0].shape[1];
                        let scale = g[0] / rows as f64;
                        let mut dz = vec![0.0; rows * cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                let hot = if c == labels[r] { 1.0 } else { 0.0 };
                                dz[r * cols + c] = scale * (probs[r * cols + c] - hot);
                            }
                        }
                        self.add_grad(logits, &dz);
                    }
                }
                Op::SoftmaxCeSoft { logits, targets, probs } => {
                    let rows = self.nodes[logits.0].shape[0];
                    let cols = self.nodes[logits.0].shape[1];
                    let scale = g[0] / rows as f64;
                    if self.needs(logits) {
                        let tv = &self.nodes[targets.0].values;
                        let mut dz = vec![0.0; rows * cols];
                        for r in 0..rows {
                            let tsum: f64 = tv[r * cols..(r + 1) * cols].iter().sum();
                            for c in 0..cols {
                                dz[r * cols + c] =
                                    scale * (probs[r * cols + c] * tsum - tv[r * cols + c]);
                            }
                        }
                        self.add_grad(logits, &dz);
                    }
                    if self.needs(targets) {
                        let zv = &self.nodes[logits.0].values;
                        let mut dt = vec![0.0; rows * cols];
                        for r in 0..rows {
                            let row = &zv[r * cols..(r + 1) * cols];
                            let lse = log_sum_exp(row);
                            for c in 0..cols {
                                dt[r * cols + c] = scale * (lse - row[c]);
                            }
                        }
                        self.add_grad(targets, &dt);
                    }
                }
                Op::BceLogits { logits, targets, weights, norm, sig } => {
                    let n = sig.len();
                    let scale = g[0] / norm;
                    if self.needs(logits) {
                        let tv = &self.nodes[targets.0].values;
                        let mut dz = vec![0.0; n];
                        for i in 0..n {
                            let w = weights.as_ref().map_or(1.0, |w| w[i]);
                            dz[i] = scale * w * (sig[i] - tv[i]);
                        }
                        self.add_grad(logits, &dz);
                    }
                    if self.needs(targets) {
                        let zv = &self.nodes[logits.0].values;
                        let mut dt = vec![0.0; n];
                        for i in 0..n {
                            let w = weights.as_ref().map_or(1.0, |w| w[i]);
                            dt[i] = -scale * w * zv[i];
                        }
                        self.add_grad(targets, &dt);
                    }
                }
            }
        }
        Ok(())
    }

    // ── internals ──

    fn push(
        &mut self,
        shape: Vec<usize>,
        values: Vec<f64>,
        needs_grad: bool,
        op: Op,
    ) -> Result<NodeId> {
        if self.consumed {
            return Err(Error::BackwardConsumed);
        }
        debug_assert!(
            values.iter().all(|v| v.is_finite()),
            "non-finite value out of {op:?}"
        );
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            needs_grad,
            op,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.needs(id))
    }

    fn add_grad(&mut self, id: NodeId, delta: &[f64]) {
        let n = &mut self.nodes[id.0];
        let g = n.grad.get_or_insert_with(|| vec![0.0; n.values.len()]);
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::NotTwoDimensional { op, shape: s.to_vec() });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn reduce_axis(&mut self, a: NodeId, axis: usize, kind: ReduceKind) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, mid, inner) = split_axis(&shape, axis);
        let vals = self.values(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for x in 0..inner {
                let mut acc = match kind {
                    ReduceKind::Max => f64::NEG_INFINITY,
                    _ => 0.0,
                };
                for m in 0..mid {
                    let v = vals[(o * mid + m) * inner + x];
                    match kind {
                        ReduceKind::Sum | ReduceKind::Mean => acc += v,
                        ReduceKind::Max => {
                            if v > acc {
                                acc = v;
                            }
                        }
                    }
                }
                if matches!(kind, ReduceKind::Mean) {
                    acc /= mid as f64;
                }
                out[o * inner + x] = acc;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let op = match kind {
            ReduceKind::Sum => Op::SumAxis { a, axis },
            ReduceKind::Mean => Op::MeanAxis { a, axis },
            ReduceKind::Max => Op::MaxAxis { a, axis },
        };
        self.push(out_shape, out, self.needs(a), op)
    }

    fn reduce_axis_backward(&self, op: &Op, a: NodeId, axis: usize, g: &[f64]) -> Vec<f64> {
        let shape = &self.nodes[a.0].shape;
        let vals = &self.nodes[a.0].values;
        let (outer, mid, inner) = split_axis(shape, axis);
        let mut da = vec![0.0; vals.len()];
        for o in 0..outer {
            for x in 0..inner {
                let go = g[o * inner + x];
                match op {
                    Op::SumAxis { .. } => {
                        for m in 0..mid {
                            da[(o * mid + m) * inner + x] = go;
                        }
                    }
                    Op::MeanAxis { .. } => {
                        for m in 0..mid {
                            da[(o * mid + m) * inner + x] = go / mid as f64;
                        }
                    }
                    Op::MaxAxis { .. } => {
                        let mut best = 0;
                        for m in 1..mid {
                            if vals[(o * mid + m) * inner + x] > vals[(o * mid + best) * inner + x] {
                                best = m;
                            }
                        }
                        da[(o * mid + best) * inner + x] = go;
                    }
                    _ => unreachable!(),
                }
            }
        }
        da
    }
}

#[derive(Clone, Copy)]
enum ReduceKind {
    Sum,
    Mean,
    Max,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}

fn zip_vals(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

/// C = A·B with A m×k, B k×n. Accumulation order over k is fixed, so a row's
/// result never depends on which batch it sits in.
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// C = A·Bᵀ with A m×n, B k×n, producing m×k.
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            let mut acc = 0.0;
            for p in 0..n {
                acc += a[i * n + p] * b[j * n + p];
            }
            c[i * k + j] = acc;
        }
    }
    c
}

/// C = Aᵀ·B with A m×k, B m×n, producing k×n.
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..k {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..m {
                acc += a[p * k + i] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: Vec<usize>, vals: Vec<f64>) -> Tensor {
        Tensor::new(shape, vals).unwrap().with_grad()
    }

    #[test]
    fn matmul_identity_is_identity() {
        let mut tape = Tape::new();
        let a = tape
            .leaf(&tensor(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        let eye = tape
            .constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])
            .unwrap();
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.values(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(matches!(
            tape.matmul(a, b),
            Err(Error::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn sum_square_gradient() {
        // loss = sum(w^2), w = [1, 2] -> dloss/dw = [2, 4]
        let w = tensor(vec![2], vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let wid = tape.leaf(&w).unwrap();
        let sq = tape.square(wid).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(wid).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // loss = sum(w*w) + sum(w) uses w twice.
        let w = tensor(vec![2], vec![3.0, -1.0]);
        let mut tape = Tape::new();
        let wid = tape.leaf(&w).unwrap();
        let prod = tape.mul(wid, wid).unwrap();
        let s1 = tape.sum(prod).unwrap();
        let s2 = tape.sum(wid).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(wid).unwrap(), &[7.0, -1.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let w = tensor(vec![1], vec![2.0]);
        let mut tape = Tape::new();
        let wid = tape.leaf(&w).unwrap();
        let loss = tape.sum(wid).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::BackwardConsumed)));
        assert!(matches!(tape.sum(wid), Err(Error::BackwardConsumed)));
    }

    #[test]
    fn backward_needs_scalar() {
        let w = tensor(vec![2], vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let wid = tape.leaf(&w).unwrap();
        let sq = tape.square(wid).unwrap();
        assert!(matches!(
            tape.backward(sq),
            Err(Error::NonScalarLoss { len: 2 })
        ));
    }

    #[test]
    fn log_rejects_nonpositive() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2], vec![1.0, 0.0]).unwrap();
        assert!(matches!(tape.log(a), Err(Error::LogDomain { .. })));
        let b = tape.constant(vec![1], vec![-3.0]).unwrap();
        assert!(matches!(tape.log(b), Err(Error::LogDomain { .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let w = tensor(vec![2], vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let wid = tape.leaf(&w).unwrap();
        let c = tape.constant(vec![2], vec![5.0, 5.0]).unwrap();
        let prod = tape.mul(wid, c).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(wid).unwrap(), &[5.0, 5.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn slice_and_concat_round_trip_gradients() {
        let w = tensor(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut tape = Tape::new();
        let wid = tape.leaf(&w).unwrap();
        let left = tape.slice_cols(wid, 0, 1).unwrap();
        let right = tape.slice_cols(wid, 1, 3).unwrap();
        let back = tape.concat_cols(&[left, right]).unwrap();
        assert_eq!(tape.values(back), tape.values(wid));
        let doubled = tape.scale(back, 2.0).unwrap();
        let loss = tape.sum(doubled).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(wid).unwrap(), &[2.0; 6]);
    }

    #[test]
    fn max_routes_gradient_to_lowest_tie() {
        let w = tensor(vec![4], vec![1.0, 7.0, 7.0, 0.0]);
        let mut tape = Tape::new();
        let wid = tape.leaf(&w).unwrap();
        let m = tape.max(wid).unwrap();
        assert_eq!(tape.scalar(m).unwrap(), 7.0);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(wid).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn axis_reductions_match_flat_oracle() {
        // 2x3 matrix: sum over axis 0 and 1 checked against hand loops.
        let vals = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vals.clone()).unwrap();
        let s0 = tape.sum_axis(a, 0).unwrap();
        assert_eq!(tape.values(s0), &[5.0, 7.0, 9.0]);
        let s1 = tape.sum_axis(a, 1).unwrap();
        assert_eq!(tape.values(s1), &[6.0, 15.0]);
        let m1 = tape.mean_axis(a, 1).unwrap();
        assert_eq!(tape.values(m1), &[2.0, 5.0]);
        let x0 = tape.max_axis(a, 0).unwrap();
        assert_eq!(tape.values(x0), &[4.0, 5.0, 6.0]);
        assert!(matches!(
            tape.sum_axis(a, 2),
            Err(Error::AxisOutOfRange { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn softmax_ce_on_uniform_logits_is_ln_c() {
        for c in [2usize, 5, 17] {
            let mut tape = Tape::new();
            let z = tape.constant(vec![3, c], vec![0.0; 3 * c]).unwrap();
            let loss = tape.softmax_cross_entropy(z, &[0, c - 1, c / 2]).unwrap();
            assert!((tape.scalar(loss).unwrap() - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ce_gradient_is_probs_minus_onehot() {
        let w = tensor(vec![1, 3], vec![1.0, 0.0, -1.0]);
        let mut tape = Tape::new();
        let z = tape.leaf(&w).unwrap();
        let loss = tape.softmax_cross_entropy(z, &[1]).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(z).unwrap();
        let mut p = [0.0; 3];
        softmax_into(&[1.0, 0.0, -1.0], &mut p);
        assert!((g[0] - p[0]).abs() < 1e-12);
        assert!((g[1] - (p[1] - 1.0)).abs() < 1e-12);
        assert!((g[2] - p[2]).abs() < 1e-12);
    }

    #[test]
    fn soft_target_ce_at_fixed_point_has_zero_gradient() {
        let logits = vec![0.7, -0.2, 1.4, 0.1, 0.1, -0.9];
        let mut targets = vec![0.0; 6];
        softmax_into(&logits[..3], &mut targets[..3]);
        softmax_into(&logits[3..], &mut targets[3..]);
        let w = tensor(vec![2, 3], logits);
        let mut tape = Tape::new();
        let z = tape.leaf(&w).unwrap();
        let t = tape.constant(vec![2, 3], targets).unwrap();
        let loss = tape.softmax_cross_entropy_soft(z, t).unwrap();
        tape.backward(loss).unwrap();
        for &g in tape.grad(z).unwrap() {
            assert!(g.abs() <= 1e-10, "residual gradient {g}");
        }
    }

    #[test]
    fn bce_fixed_point_has_zero_gradient() {
        let logits = vec![0.7, -0.2, 1.4, 0.1];
        let targets: Vec<f64> = logits.iter().map(|&z| stable_sigmoid(z)).collect();
        let w = tensor(vec![2, 2], logits);
        let mut tape = Tape::new();
        let z = tape.leaf(&w).unwrap();
        let t = tape.constant(vec![2, 2], targets).unwrap();
        let loss = tape.bce_with_logits(z, t, None, 4.0).unwrap();
        tape.backward(loss).unwrap();
        for &g in tape.grad(z).unwrap() {
            assert!(g.abs() <= 1e-10, "residual gradient {g}");
        }
    }

    #[test]
    fn bce_matches_label_targets() {
        // Two entries, targets 1 and 0, logits 0 -> mean loss ln 2.
        let mut tape = Tape::new();
        let z = tape.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let t = tape.constant(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let loss = tape.bce_with_logits(z, t, None, 2.0).unwrap();
        assert!((tape.scalar(loss).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape
                .constant(vec![3, 3], (0..9).map(|i| (i as f64).sin()).collect())
                .unwrap();
            let b = tape
                .constant(vec![3, 3], (0..9).map(|i| (i as f64).cos()).collect())
                .unwrap();
            let c = tape.matmul(a, b).unwrap();
            let s = tape.sigmoid(c).unwrap();
            let l = tape.mean(s).unwrap();
            tape.scalar(l).unwrap().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn batched_row_equals_single_row() {
        // The same input row must produce bit-identical output whether it is
        // alone in a batch or stacked with others.
        let w: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) / 3.0).collect();
        let row: Vec<f64> = vec![0.3, -1.2, 0.8];
        let mut batch = row.clone();
        batch.extend([1.0, 2.0, -0.5]);
        batch.extend([-2.0, 0.1, 0.4]);

        let single = {
            let mut tape = Tape::new();
            let x = tape.constant(vec![1, 3], row.clone()).unwrap();
            let wt = tape.constant(vec![3, 4], w.clone()).unwrap();
            let y = tape.matmul(x, wt).unwrap();
            tape.values(y).to_vec()
        };
        let stacked = {
            let mut tape = Tape::new();
            let x = tape.constant(vec![3, 3], batch).unwrap();
            let wt = tape.constant(vec![3, 4], w).unwrap();
            let y = tape.matmul(x, wt).unwrap();
            tape.values(y)[..4].to_vec()
        };
        assert_eq!(single, stacked);
    }
}

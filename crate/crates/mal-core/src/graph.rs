//! Reverse-mode autodiff over an eagerly evaluated tape.
//!
//! Ops append nodes to a [`Tape`] and compute their forward value
//! immediately; [`Tape::backward`] walks the tape in reverse and
//! accumulates parameter gradients into a [`ParamStore`]. The tape is
//! rebuilt per batch, which keeps shapes concrete and the engine small.

use alloc::format;
use alloc::string::{String, ToString};

use alloc::vec::Vec;

use crate::optim::ParamStore;
use crate::tensor::{self, log1p_exp, sigmoid, Tensor};
use crate::{MalError, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param { name: String },
    Embed { name: String, ids: Vec<usize> },
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddRow { x: NodeId, row: NodeId },
    Concat { parts: Vec<NodeId> },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Softmax { x: NodeId },
    StopGrad,
    Scale { x: NodeId, c: f64 },
    SumScalars { xs: Vec<NodeId> },
    WeightedBce { logits: NodeId, labels: Vec<f64>, weights: Vec<f64> },
    SoftmaxCe { logits: NodeId, classes: Vec<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// The autodiff tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor, context: &str) -> Result<NodeId> {
        value.check_finite(context)?;
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a [1]-shaped node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    /// A constant (non-differentiable) input.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Input, value, "input")
    }

    /// A parameter leaf; its value is snapshotted from the store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let value = store.value(name)?.clone();
        self.push(
            Op::Param {
                name: name.to_string(),
            },
            value,
            name,
        )
    }

    /// Row gather from a 2-d parameter table: output [len(ids), dim].
    pub fn embed(&mut self, store: &ParamStore, name: &str, ids: &[usize]) -> Result<NodeId> {
        let table = store.value(name)?;
        let rows = table.rows();
        let dim = table.cols();
        let mut out = Tensor::zeros(&[ids.len(), dim]);
        for (i, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(MalError::Index(format!(
                    "embedding id {id} out of range for {name} with {rows} rows"
                )));
            }
            out.data_mut()[i * dim..(i + 1) * dim]
                .copy_from_slice(&table.data()[id * dim..(id + 1) * dim]);
        }
        self.push(
            Op::Embed {
                name: name.to_string(),
                ids: ids.to_vec(),
            },
            out,
            name,
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        self.push(Op::Matmul { a, b }, v, "matmul")
    }

    /// Elementwise sum of two same-shape nodes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(MalError::Shape(format!(
                "add mismatch: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = ta.clone();
        for (o, x) in out.data_mut().iter_mut().zip(tb.data()) {
            *o += x;
        }
        self.push(Op::Add { a, b }, out, "add")
    }

    /// Broadcast a [dim] row (bias) over the rows of x:[batch, dim].
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (tx, tr) = (self.value(x), self.value(row));
        let dim = tx.cols();
        if tr.len() != dim {
            return Err(MalError::Shape(format!(
                "add_row mismatch: {:?} vs {:?}",
                tx.shape(),
                tr.shape()
            )));
        }
        let mut out = tx.clone();
        for r in 0..out.rows() {
            let slice = &mut out.data_mut()[r * dim..(r + 1) * dim];
            for (o, b) in slice.iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        self.push(Op::AddRow { x, row }, out, "add_row")
    }

    /// Concatenate [batch, d_i] nodes along the feature axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(MalError::Shape("concat of zero parts".to_string()));
        }
        let batch = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != batch {
                return Err(MalError::Shape(format!(
                    "concat row mismatch: {} vs {}",
                    t.rows(),
                    batch
                )));
            }
            total += t.cols();
        }
        let mut out = Tensor::zeros(&[batch, total]);
        let mut offset = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            let d = t.cols();
            for r in 0..batch {
                out.data_mut()[r * total + offset..r * total + offset + d]
                    .copy_from_slice(&t.data()[r * d..(r + 1) * d]);
            }
            offset += d;
        }
        self.push(
            Op::Concat {
                parts: parts.to_vec(),
            },
            out,
            "concat",
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(Op::Relu { x }, out, "relu")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = sigmoid(*v);
        }
        self.push(Op::Sigmoid { x }, out, "sigmoid")
    }

    /// Row-wise softmax over a [batch, classes] node.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = Tensor::zeros(&[rows, cols]);
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
            softmax_row(row, dst);
        }
        self.push(Op::Softmax { x }, out, "softmax")
    }

    /// Identity in the forward pass; blocks gradient flow in the backward.
    pub fn stop_grad(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).clone();
        let _ = x;
        self.push(Op::StopGrad, v, "stop_grad")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v *= c;
        }
        self.push(Op::Scale { x, c }, out, "scale")
    }

    /// Sum of scalar ([1]-shaped) nodes.
    pub fn sum_scalars(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let mut acc = 0.0;
        for &x in xs {
            let t = self.value(x);
            if t.len() != 1 {
                return Err(MalError::Shape(format!(
                    "sum_scalars over non-scalar {:?}",
                    t.shape()
                )));
            }
            acc += t.data()[0];
        }
        self.push(Op::SumScalars { xs: xs.to_vec() }, Tensor::scalar(acc), "sum_scalars")
    }

    /// Weighted binary cross-entropy over logits, summed across the batch.
    ///
    /// Per element: `w * [-l*log σ(ŷ) - (1-l)*log(1-σ(ŷ))]`, evaluated in
    /// the stable form `w * (log1p_exp(ŷ) - l*ŷ)`. Labels may be
    /// fractional in [0,1]; weights must be strictly positive.
    pub fn weighted_bce(&mut self, logits: NodeId, labels: &[f64], weights: &[f64]) -> Result<NodeId> {
        let t = self.value(logits);
        let n = t.len();
        if labels.len() != n || weights.len() != n {
            return Err(MalError::Shape(format!(
                "bce arity mismatch: {n} logits, {} labels, {} weights",
                labels.len(),
                weights.len()
            )));
        }
        let mut acc = 0.0;
        for i in 0..n {
            let (l, w) = (labels[i], weights[i]);
            if w <= 0.0 {
                return Err(MalError::Domain(format!("nonpositive bce weight {w}")));
            }
            if !(0.0..=1.0).contains(&l) {
                return Err(MalError::Domain(format!("bce label {l} outside [0,1]")));
            }
            let y = t.data()[i];
            acc += w * (log1p_exp(y) - l * y);
        }
        self.push(
            Op::WeightedBce {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            Tensor::scalar(acc),
            "weighted_bce",
        )
    }

    /// Multiclass cross-entropy over [batch, classes] logits, summed
    /// across the batch.
    pub fn softmax_ce(&mut self, logits: NodeId, classes: &[usize]) -> Result<NodeId> {
        let t = self.value(logits);
        let (rows, cols) = (t.rows(), t.cols());
        if classes.len() != rows {
            return Err(MalError::Shape(format!(
                "softmax_ce arity mismatch: {rows} rows, {} classes",
                classes.len()
            )));
        }
        let mut acc = 0.0;
        for r in 0..rows {
            let class = classes[r];
            if class >= cols {
                return Err(MalError::Domain(format!(
                    "class {class} out of range for {cols} logits"
                )));
            }
            let row = &t.data()[r * cols..(r + 1) * cols];
            acc += log_sum_exp(row) - row[class];
        }
        self.push(
            Op::SoftmaxCe {
                logits,
                classes: classes.to_vec(),
            },
            Tensor::scalar(acc),
            "softmax_ce",
        )
    }

    /// Reverse pass from a scalar loss node; parameter gradients are
    /// accumulated into `store` (zero it first for fresh gradients).
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(MalError::Graph("backward from non-scalar node".to_string()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input | Op::StopGrad => {
                    // Input: leaf. StopGrad: gradient dies here.
                }
                Op::Param { name } => store.accumulate_grad(name, &g)?,
                Op::Embed { name, ids } => {
                    let dim = g.cols();
                    for (i, &id) in ids.iter().enumerate() {
                        store.accumulate_grad_row(name, id, &g.data()[i * dim..(i + 1) * dim])?;
                    }
                }
                Op::Matmul { a, b } => {
                    let da = tensor::matmul_nt(&g, &self.nodes[b.0].value)?;
                    let db = tensor::matmul_tn(&self.nodes[a.0].value, &g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow { x, row } => {
                    let dim = g.cols();
                    let mut drow = Tensor::zeros(self.nodes[row.0].value.shape());
                    for r in 0..g.rows() {
                        for c in 0..dim {
                            drow.data_mut()[c] += g.data()[r * dim + c];
                        }
                    }
                    accumulate(&mut grads, *x, g);
                    accumulate(&mut grads, *row, drow);
                }
                Op::Concat { parts } => {
                    let total = g.cols();
                    let batch = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let d = self.nodes[p.0].value.cols();
                        let mut dp = Tensor::zeros(self.nodes[p.0].value.shape());
                        for r in 0..batch {
                            dp.data_mut()[r * d..(r + 1) * d].copy_from_slice(
                                &g.data()[r * total + offset..r * total + offset + d],
                            );
                        }
                        accumulate(&mut grads, p, dp);
                        offset += d;
                    }
                }
                Op::Relu { x } => {
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(self.nodes[x.0].value.data()) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid { x } => {
                    let mut dx = g;
                    for (d, &y) in dx.data_mut().iter_mut().zip(self.nodes[idx].value.data()) {
                        *d *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Softmax { x } => {
                    let y = &self.nodes[idx].value;
                    let (rows, cols) = (y.rows(), y.cols());
                    let mut dx = Tensor::zeros(y.shape());
                    for r in 0..rows {
                        let yr = &y.data()[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let dst = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dst[c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Scale { x, c } => {
                    let mut dx = g;
                    for d in dx.data_mut() {
                        *d *= c;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SumScalars { xs } => {
                    for &x in xs {
                        accumulate(&mut grads, x, g.clone());
                    }
                }
                Op::WeightedBce {
                    logits,
                    labels,
                    weights,
                } => {
                    let scale = g.data()[0];
                    let t = &self.nodes[logits.0].value;
                    let mut dx = Tensor::zeros(t.shape());
                    for i in 0..t.len() {
                        dx.data_mut()[i] =
                            scale * weights[i] * (sigmoid(t.data()[i]) - labels[i]);
                    }
                    accumulate(&mut grads, *logits, dx);
                }
                Op::SoftmaxCe { logits, classes } => {
                    let scale = g.data()[0];
                    let t = &self.nodes[logits.0].value;
                    let (rows, cols) = (t.rows(), t.cols());
                    let mut dx = Tensor::zeros(t.shape());
                    for r in 0..rows {
                        let row = &t.data()[r * cols..(r + 1) * cols];
                        let dst = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                        softmax_row(row, dst);
                        dst[classes[r]] -= 1.0;
                        for v in dst.iter_mut() {
                            *v *= scale;
                        }
                    }
                    accumulate(&mut grads, *logits, dx);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id.0] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot => *slot = Some(delta),
    }
}

fn softmax_row(row: &[f64], dst: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &v) in dst.iter_mut().zip(row) {
        *d = libm::exp(v - max);
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| libm::exp(v - max)).sum();
    max + libm::log(sum)
}

/// Standalone weighted BCE for scalar use (reporting, fitting loops).
pub fn weighted_bce_scalar(logit: f64, label: f64, weight: f64) -> Result<f64> {
    if weight <= 0.0 {
        return Err(MalError::Domain(format!("nonpositive bce weight {weight}")));
    }
    if !(0.0..=1.0).contains(&label) {
        return Err(MalError::Domain(format!("bce label {label} outside [0,1]")));
    }
    Ok(weight * (log1p_exp(logit) - label * logit))
}

/// Standalone multiclass cross-entropy for one logit row.
pub fn softmax_ce_scalar(logits: &[f64], class: usize) -> Result<f64> {
    if class >= logits.len() {
        return Err(MalError::Domain(format!(
            "class {class} out of range for {} logits",
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits) - logits[class])
}

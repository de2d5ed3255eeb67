use std::sync::Arc;

use super::tensor::{axpy, dot, SparseRows, Tensor};
use super::{EngineError, Segments};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Hadamard(Var, Var),
    Mask(Var, Arc<[f64]>),
    LeakyRelu(Var, f64),
    Elu(Var),
    Sigmoid(Var),
    ConcatCols(Vec<Var>),
    Mean(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Arc<[usize]>),
    SegmentSoftmax(Var, Arc<Segments>),
    SegmentWeightedSum {
        values: Var,
        weights: Option<Var>,
        segments: Arc<Segments>,
    },
    SparseProject(Arc<SparseRows>, Var),
    Sum(Var),
    BinaryCrossEntropy {
        probs: Var,
        labels: Arc<[f64]>,
    },
    LogisticLoss {
        logits: Var,
        labels: Arc<[f64]>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run record of tensor operations.
///
/// Every operation appends one node; [`Tape::backward`] walks the nodes in
/// reverse and consumes the tape. Parameters are re-registered as leaves on
/// a fresh tape for each step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` requires a gradient
    /// and the loss depends on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<(), EngineError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(EngineError::NonFinite { op })
    }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(
        &mut self,
        name: &'static str,
        value: Tensor,
        inputs: &[Var],
        op: Op,
    ) -> Result<Var, EngineError> {
        check_finite(name, &value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, requires_grad, op))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), EngineError> {
        let (l, r) = (self.value(a).shape(), self.value(b).shape());
        if l != r {
            return Err(EngineError::ShapeMismatch {
                op,
                left: l,
                right: r,
            });
        }
        Ok(())
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var, EngineError> {
        check_finite("param", &value)?;
        Ok(self.push(value, true, Op::Leaf))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, EngineError> {
        check_finite("constant", &value)?;
        Ok(self.push(value, false, Op::Leaf))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        let value = self.value(a).matmul(self.value(b))?;
        self.record("matmul", value, &[a, b], Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.record("add", value, &[a, b], Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, EngineError> {
        let value = self.value(a).map(|v| v * factor);
        self.record("scale", value, &[a], Op::Scale(a, factor))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.same_shape("hadamard", a, b)?;
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        self.record("hadamard", value, &[a, b], Op::Hadamard(a, b))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask(&mut self, a: Var, mask: Arc<[f64]>) -> Result<Var, EngineError> {
        if mask.len() != self.value(a).len() {
            return Err(EngineError::Invalid(format!(
                "mask of length {} for tensor of {} values",
                mask.len(),
                self.value(a).len()
            )));
        }
        let mut value = self.value(a).clone();
        for (x, m) in value.data_mut().iter_mut().zip(mask.iter()) {
            *x *= m;
        }
        self.record("mask", value, &[a], Op::Mask(a, mask))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, EngineError> {
        if slope.is_nan() || slope < 0.0 {
            return Err(EngineError::Invalid(format!("negative slope {slope}")));
        }
        let value = self
            .value(a)
            .map(|x| if x > 0.0 { x } else { slope * x });
        self.record("leaky_relu", value, &[a], Op::LeakyRelu(a, slope))
    }

    pub fn elu(&mut self, a: Var) -> Result<Var, EngineError> {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { x.exp_m1() });
        self.record("elu", value, &[a], Op::Elu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, EngineError> {
        let value = self.value(a).map(sigmoid);
        self.record("sigmoid", value, &[a], Op::Sigmoid(a))
    }

    /// Places the inputs side by side; all must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, EngineError> {
        let first = *parts
            .first()
            .ok_or_else(|| EngineError::Invalid("concat of zero tensors".into()))?;
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(EngineError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(first).shape(),
                    right: self.value(p).shape(),
                });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut at = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                value.row_mut(r)[at..at + src.len()].copy_from_slice(src);
                at += src.len();
            }
        }
        self.record("concat_cols", value, parts, Op::ConcatCols(parts.to_vec()))
    }

    /// Elementwise mean of same-shaped tensors (head averaging).
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var, EngineError> {
        let first = *parts
            .first()
            .ok_or_else(|| EngineError::Invalid("mean of zero tensors".into()))?;
        for &p in &parts[1..] {
            self.same_shape("mean", first, p)?;
        }
        let mut value = self.value(first).clone();
        for &p in &parts[1..] {
            value.add_assign(self.value(p));
        }
        let k = parts.len() as f64;
        value.data_mut().iter_mut().for_each(|v| *v /= k);
        self.record("mean", value, parts, Op::Mean(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, EngineError> {
        let src = self.value(a);
        if start + len > src.rows() {
            return Err(EngineError::IndexOutOfRange {
                index: start + len,
                rows: src.rows(),
            });
        }
        let cols = src.cols();
        let value =
            Tensor::from_vec(len, cols, src.data()[start * cols..(start + len) * cols].to_vec())?;
        self.record("slice_rows", value, &[a], Op::SliceRows(a, start))
    }

    /// Row `p` of the result is row `indices[p]` of `a`. Indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: Arc<[usize]>) -> Result<Var, EngineError> {
        let src = self.value(a);
        let cols = src.cols();
        let mut value = Tensor::zeros(indices.len(), cols);
        for (p, &i) in indices.iter().enumerate() {
            if i >= src.rows() {
                return Err(EngineError::IndexOutOfRange {
                    index: i,
                    rows: src.rows(),
                });
            }
            value.row_mut(p).copy_from_slice(src.row(i));
        }
        self.record("gather_rows", value, &[a], Op::GatherRows(a, indices))
    }

    /// Softmax of a column of logits within each segment. Each segment's
    /// maximum is subtracted before exponentiation.
    pub fn segment_softmax(
        &mut self,
        logits: Var,
        segments: Arc<Segments>,
    ) -> Result<Var, EngineError> {
        let x = self.value(logits);
        if x.cols() != 1 || x.rows() != segments.positions() {
            return Err(EngineError::Segment(format!(
                "{}x{} logits for {} segment positions",
                x.rows(),
                x.cols(),
                segments.positions()
            )));
        }
        let mut value = Tensor::zeros(x.rows(), 1);
        for s in 0..segments.len() {
            let span = segments.span(s);
            if span.is_empty() {
                return Err(EngineError::EmptySegment(s));
            }
            let xs = &x.data()[span.clone()];
            let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut value.data_mut()[span];
            let mut total = 0.0;
            for (o, &v) in out.iter_mut().zip(xs) {
                *o = (v - max).exp();
                total += *o;
            }
            out.iter_mut().for_each(|o| *o /= total);
        }
        self.record(
            "segment_softmax",
            value,
            &[logits],
            Op::SegmentSoftmax(logits, segments),
        )
    }

    /// Row `s` of the result is `sum_p weights[p] * values[source(p)]` over
    /// the positions `p` of segment `s`. Missing weights mean all ones.
    pub fn segment_weighted_sum(
        &mut self,
        values: Var,
        weights: Option<Var>,
        segments: Arc<Segments>,
    ) -> Result<Var, EngineError> {
        let v = self.value(values);
        if let Some(&bad) = segments.sources().iter().find(|&&i| i >= v.rows()) {
            return Err(EngineError::IndexOutOfRange {
                index: bad,
                rows: v.rows(),
            });
        }
        let w = match weights {
            Some(w) => {
                let w = self.value(w);
                if w.cols() != 1 || w.rows() != segments.positions() {
                    return Err(EngineError::Segment(format!(
                        "{}x{} weights for {} segment positions",
                        w.rows(),
                        w.cols(),
                        segments.positions()
                    )));
                }
                Some(w.data())
            }
            None => None,
        };
        let mut value = Tensor::zeros(segments.len(), v.cols());
        for s in 0..segments.len() {
            let out = value.row_mut(s);
            for p in segments.span(s) {
                let alpha = w.map_or(1.0, |w| w[p]);
                axpy(alpha, v.row(segments.sources()[p]), out);
            }
        }
        let mut inputs = vec![values];
        inputs.extend(weights);
        self.record(
            "segment_weighted_sum",
            value,
            &inputs,
            Op::SegmentWeightedSum {
                values,
                weights,
                segments,
            },
        )
    }

    /// `x * w` for a constant sparse `x` and a dense `w`.
    pub fn sparse_project(&mut self, x: Arc<SparseRows>, w: Var) -> Result<Var, EngineError> {
        let wt = self.value(w);
        if x.cols() != wt.rows() {
            return Err(EngineError::ShapeMismatch {
                op: "sparse_project",
                left: (x.rows(), x.cols()),
                right: wt.shape(),
            });
        }
        let mut value = Tensor::zeros(x.rows(), wt.cols());
        for r in 0..x.rows() {
            let (idx, vals) = x.row(r);
            let out = value.row_mut(r);
            for (&c, &a) in idx.iter().zip(vals) {
                axpy(a, wt.row(c), out);
            }
        }
        self.record("sparse_project", value, &[w], Op::SparseProject(x, w))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, EngineError> {
        let total = self.value(a).data().iter().sum();
        self.record("sum", Tensor::scalar(total), &[a], Op::Sum(a))
    }

    /// Mean binary cross-entropy of a column of probabilities. Probabilities
    /// are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking logs.
    pub fn binary_cross_entropy(
        &mut self,
        probs: Var,
        labels: Arc<[f64]>,
    ) -> Result<Var, EngineError> {
        let p = self.value(probs);
        if p.cols() != 1 || p.rows() != labels.len() {
            return Err(EngineError::Invalid(format!(
                "{}x{} probabilities for {} labels",
                p.rows(),
                p.cols(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(EngineError::Invalid("empty batch".into()));
        }
        let n = labels.len() as f64;
        let total: f64 = p
            .data()
            .iter()
            .zip(labels.iter())
            .map(|(&p, &y)| {
                let p = clamp_prob(p);
                y * p.ln() + (1.0 - y) * (1.0 - p).ln()
            })
            .sum();
        self.record(
            "binary_cross_entropy",
            Tensor::scalar(-total / n),
            &[probs],
            Op::BinaryCrossEntropy { probs, labels },
        )
    }

    /// Cross-entropy of `sigmoid(logits)`, fused. The value is exactly
    /// [`Tape::binary_cross_entropy`] of the sigmoid (clamped logs); the
    /// gradient is the closed form `(sigmoid(z) - y) / n`, which stays
    /// informative for saturated wrong predictions where the chained
    /// derivative through the clamp underflows to nothing.
    pub fn logistic_loss(&mut self, logits: Var, labels: Arc<[f64]>) -> Result<Var, EngineError> {
        let z = self.value(logits);
        if z.cols() != 1 || z.rows() != labels.len() {
            return Err(EngineError::Invalid(format!(
                "{}x{} logits for {} labels",
                z.rows(),
                z.cols(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(EngineError::Invalid("empty batch".into()));
        }
        let n = labels.len() as f64;
        let total: f64 = z
            .data()
            .iter()
            .zip(labels.iter())
            .map(|(&z, &y)| {
                let p = clamp_prob(sigmoid(z));
                y * p.ln() + (1.0 - y) * (1.0 - p).ln()
            })
            .sum();
        self.record(
            "logistic_loss",
            Tensor::scalar(-total / n),
            &[logits],
            Op::LogisticLoss { logits, labels },
        )
    }

    /// Reverse pass from a `1 x 1` loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients, EngineError> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(EngineError::NonScalarLoss(shape.0, shape.1));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            // Only leaves keep their gradient.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    log::debug!("non-finite gradient at node {i}");
                    return Err(EngineError::NonFinite { op: "backward" });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    acc(*a, g.matmul_bt(self.value(*b)));
                }
                if self.requires_grad(*b) {
                    acc(*b, self.value(*a).matmul_at(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Scale(a, factor) => acc(*a, g.map(|v| v * factor)),
            Op::Hadamard(a, b) => {
                let mut ga = g.clone();
                for (x, y) in ga.data_mut().iter_mut().zip(self.value(*b).data()) {
                    *x *= y;
                }
                let mut gb = g.clone();
                for (x, y) in gb.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *x *= y;
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Mask(a, mask) => {
                let mut ga = g.clone();
                for (x, m) in ga.data_mut().iter_mut().zip(mask.iter()) {
                    *x *= m;
                }
                acc(*a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let mut ga = g.clone();
                for (d, &x) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                    if x <= 0.0 {
                        *d *= slope;
                    }
                }
                acc(*a, ga);
            }
            Op::Elu(a) => {
                let mut ga = g.clone();
                for (d, &y) in ga.data_mut().iter_mut().zip(out.data()) {
                    if y <= 0.0 {
                        *d *= y + 1.0;
                    }
                }
                acc(*a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g.clone();
                for (d, &y) in ga.data_mut().iter_mut().zip(out.data()) {
                    *d *= y * (1.0 - y);
                }
                acc(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut gp = Tensor::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[at..at + cols]);
                        }
                        acc(p, gp);
                    }
                    at += cols;
                }
            }
            Op::Mean(parts) => {
                let k = parts.len() as f64;
                for &p in parts {
                    acc(p, g.map(|v| v / k));
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut ga = Tensor::zeros(src.rows(), src.cols());
                let cols = src.cols();
                ga.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                acc(*a, ga);
            }
            Op::GatherRows(a, indices) => {
                let src = self.value(*a);
                let mut ga = Tensor::zeros(src.rows(), src.cols());
                for (p, &i) in indices.iter().enumerate() {
                    axpy(1.0, g.row(p), ga.row_mut(i));
                }
                acc(*a, ga);
            }
            Op::SegmentSoftmax(a, segments) => {
                let mut ga = Tensor::zeros(out.rows(), 1);
                for s in 0..segments.len() {
                    let span = segments.span(s);
                    let y = &out.data()[span.clone()];
                    let dy = &g.data()[span.clone()];
                    let inner = dot(y, dy);
                    for ((d, &yi), &dyi) in ga.data_mut()[span].iter_mut().zip(y).zip(dy) {
                        *d = yi * (dyi - inner);
                    }
                }
                acc(*a, ga);
            }
            Op::SegmentWeightedSum {
                values,
                weights,
                segments,
            } => {
                let v = self.value(*values);
                let w = weights.map(|w| self.value(w).data());
                if self.requires_grad(*values) {
                    let mut gv = Tensor::zeros(v.rows(), v.cols());
                    for s in 0..segments.len() {
                        for p in segments.span(s) {
                            let alpha = w.map_or(1.0, |w| w[p]);
                            axpy(alpha, g.row(s), gv.row_mut(segments.sources()[p]));
                        }
                    }
                    acc(*values, gv);
                }
                if let Some(wv) = weights {
                    if self.requires_grad(*wv) {
                        let mut gw = Tensor::zeros(segments.positions(), 1);
                        for s in 0..segments.len() {
                            for p in segments.span(s) {
                                gw.data_mut()[p] = dot(g.row(s), v.row(segments.sources()[p]));
                            }
                        }
                        acc(*wv, gw);
                    }
                }
            }
            Op::SparseProject(x, w) => {
                let wt = self.value(*w);
                let mut gw = Tensor::zeros(wt.rows(), wt.cols());
                for r in 0..x.rows() {
                    let (idx, vals) = x.row(r);
                    for (&c, &a) in idx.iter().zip(vals) {
                        axpy(a, g.row(r), gw.row_mut(c));
                    }
                }
                acc(*w, gw);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Tensor::filled(r, c, g.item()));
            }
            Op::BinaryCrossEntropy { probs, labels } => {
                let p = self.value(*probs);
                let n = labels.len() as f64;
                let scale = g.item() / n;
                let data = p
                    .data()
                    .iter()
                    .zip(labels.iter())
                    .map(|(&p, &y)| {
                        let p = clamp_prob(p);
                        -scale * (y / p - (1.0 - y) / (1.0 - p))
                    })
                    .collect();
                acc(*probs, Tensor::column(data));
            }
            Op::LogisticLoss { logits, labels } => {
                let z = self.value(*logits);
                let scale = g.item() / labels.len() as f64;
                let data = z
                    .data()
                    .iter()
                    .zip(labels.iter())
                    .map(|(&z, &y)| scale * (sigmoid(z) - y))
                    .collect();
                acc(*logits, Tensor::column(data));
            }
        }
    }
}

/// Lower clamp applied to probabilities inside the cross-entropy.
pub const PROB_CLAMP: f64 = 1e-12;

pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

//! Reverse-mode differentiation over a linear tape of recorded operations.
//!
//! Every differentiable primitive the model needs is one `Op` variant with a
//! hand-written backward rule; arbitrary compositions then differentiate
//! correctly by construction. The tape is append-only and already in
//! execution order, so the backward pass is a single reverse sweep that
//! visits each node exactly once.
//!
//! Values are immutable once their producing op has written them. Leaves
//! with `requires_grad = false` (frozen embedding tables) never accumulate
//! gradient; interior nodes only carry gradient when some upstream leaf
//! requires it.

use std::sync::OnceLock;

use crate::rng::SeededRng;
use crate::tensor::{BoolMat, NumericsError, Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

/// Additive pre-softmax penalty for masked positions. Underflows to an
/// exact zero after exponentiation; a post-correction guarantees it.
const MASK_PENALTY: f64 = -1e9;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add {
        a: ValueId,
        b: ValueId,
    },
    /// Broadcast a bias vector over every row of a matrix.
    AddRow {
        a: ValueId,
        bias: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    Scale {
        a: ValueId,
        factor: f64,
    },
    Matmul {
        a: ValueId,
        b: ValueId,
    },
    Transpose {
        a: ValueId,
    },
    Relu {
        a: ValueId,
    },
    GatherRows {
        a: ValueId,
        indices: Vec<usize>,
    },
    SliceCols {
        a: ValueId,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<ValueId>,
    },
    Softmax {
        a: ValueId,
        mask: Option<BoolMat>,
    },
    LayerNorm {
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
        eps: f64,
    },
    /// Row-conditional add: rows flagged by the indicator get `on_vec`,
    /// the rest get `off_vec`.
    MarkRows {
        x: ValueId,
        on_vec: ValueId,
        off_vec: ValueId,
        indicators: Vec<bool>,
    },
    CrossEntropy {
        logits: ValueId,
        gold: Vec<usize>,
        epsilon: f64,
        pad_id: usize,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Unsmoothed byproducts of the smoothed loss, used for perplexity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossAux {
    /// Smoothed cross-entropy summed over counted tokens.
    pub smoothed_sum: f64,
    /// Plain negative log-likelihood summed over counted tokens.
    pub nll_sum: f64,
    /// Number of non-pad target tokens.
    pub count: usize,
}

/// Recorded computation with values in execution order.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

fn kernel_threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var("DEFMOD_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(1)
    })
}

/// out[m x n] = a[m x k] . b[k x n]. Row-partitioned when DEFMOD_THREADS > 1;
/// each output row is an independent sequential accumulation, so results are
/// identical under any partitioning.
fn matmul_into<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(out.len(), m * n);
    let row_job = |i: usize, out_row: &mut [T]| {
        for v in out_row.iter_mut() {
            *v = T::zero();
        }
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * n..kk * n + n];
            for (o, &bv) in out_row.iter_mut().zip(brow) {
                *o = T::from_f64(o.to_f64() + aik.to_f64() * bv.to_f64());
            }
        }
    };
    let threads = kernel_threads().min(m.max(1));
    if threads <= 1 || m < 2 * threads {
        for i in 0..m {
            row_job(i, &mut out[i * n..(i + 1) * n]);
        }
        return;
    }
    let chunk_rows = m.div_ceil(threads);
    std::thread::scope(|scope| {
        for (c, chunk) in out.chunks_mut(chunk_rows * n).enumerate() {
            let row_job = &row_job;
            scope.spawn(move || {
                for (r, out_row) in chunk.chunks_mut(n).enumerate() {
                    row_job(c * chunk_rows + r, out_row);
                }
            });
        }
    });
}

fn transpose_into<T: Real>(a: &[T], rows: usize, cols: usize, out: &mut [T]) {
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input value. Gradient accumulation follows the tensor's
    /// `requires_grad` flag.
    pub fn leaf(&mut self, value: Tensor<T>) -> ValueId {
        let needs = value.requires_grad;
        self.push(value, Op::Leaf, needs)
    }

    /// Register a value that never participates in differentiation.
    pub fn constant(&mut self, mut value: Tensor<T>) -> ValueId {
        value.requires_grad = false;
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated by [`Graph::backward`], if any.
    pub fn grad(&self, id: ValueId) -> Option<&[T]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> ValueId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn record(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op,
        inputs_need: bool,
    ) -> Result<ValueId, NumericsError> {
        if !data.iter().all(|x| x.is_finite()) {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, inputs_need))
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn same_shape(
        &self,
        op: &'static str,
        a: ValueId,
        b: ValueId,
    ) -> Result<(), NumericsError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NumericsError::ShapeMismatch {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| T::from_f64(x.to_f64() + y.to_f64()))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.record("add", shape, data, Op::Add { a, b }, needs)
    }

    pub fn add_row(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId, NumericsError> {
        let (r, c) = (self.value(a).rows(), self.value(a).cols());
        if self.value(bias).shape() != [c] {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let bias_data = self.value(bias).data().to_vec();
        let mut data = Vec::with_capacity(r * c);
        for row in 0..r {
            for (j, &bv) in bias_data.iter().enumerate() {
                data.push(T::from_f64(
                    self.value(a).data()[row * c + j].to_f64() + bv.to_f64(),
                ));
            }
        }
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(bias);
        self.record("add_row", shape, data, Op::AddRow { a, bias }, needs)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| T::from_f64(x.to_f64() * y.to_f64()))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.record("mul", shape, data, Op::Mul { a, b }, needs)
    }

    pub fn scale(&mut self, a: ValueId, factor: f64) -> Result<ValueId, NumericsError> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| T::from_f64(x.to_f64() * factor))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a);
        self.record("scale", shape, data, Op::Scale { a, factor }, needs)
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.is_matrix() || !vb.is_matrix() || va.cols() != vb.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut data = vec![T::zero(); m * n];
        matmul_into(va.data(), vb.data(), m, k, n, &mut data);
        let needs = self.needs(a) || self.needs(b);
        self.record("matmul", vec![m, n], data, Op::Matmul { a, b }, needs)
    }

    pub fn transpose(&mut self, a: ValueId) -> Result<ValueId, NumericsError> {
        let va = self.value(a);
        if !va.is_matrix() {
            return Err(NumericsError::NotMatrix {
                op: "transpose",
                shape: va.shape().to_vec(),
            });
        }
        let (r, c) = (va.rows(), va.cols());
        let mut data = vec![T::zero(); r * c];
        transpose_into(va.data(), r, c, &mut data);
        let needs = self.needs(a);
        self.record("transpose", vec![c, r], data, Op::Transpose { a }, needs)
    }

    pub fn relu(&mut self, a: ValueId) -> Result<ValueId, NumericsError> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x.maximum(T::zero()))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a);
        self.record("relu", shape, data, Op::Relu { a }, needs)
    }

    /// Row gather; also serves as embedding lookup. Gradient scatter-adds
    /// into the source, so repeated indices accumulate.
    pub fn gather_rows(&mut self, a: ValueId, indices: &[usize]) -> Result<ValueId, NumericsError> {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        for &idx in indices {
            if idx >= r {
                return Err(NumericsError::IndexOutOfRange {
                    op: "gather_rows",
                    index: idx,
                    bound: r,
                });
            }
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &idx in indices {
            data.extend_from_slice(va.row(idx));
        }
        let needs = self.needs(a);
        self.record(
            "gather_rows",
            vec![indices.len(), c],
            data,
            Op::GatherRows {
                a,
                indices: indices.to_vec(),
            },
            needs,
        )
    }

    pub fn slice_cols(
        &mut self,
        a: ValueId,
        start: usize,
        len: usize,
    ) -> Result<ValueId, NumericsError> {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        if start + len > c || len == 0 {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: c,
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for row in 0..r {
            data.extend_from_slice(&va.row(row)[start..start + len]);
        }
        let needs = self.needs(a);
        self.record(
            "slice_cols",
            vec![r, len],
            data,
            Op::SliceCols { a, start, len },
            needs,
        )
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::Config("concat_cols: no parts".into()));
        }
        let r = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != r {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            total += self.value(p).cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for row in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(row));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.record(
            "concat_cols",
            vec![r, total],
            data,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        )
    }

    /// Row-wise softmax. Masked entries receive an additive penalty before
    /// exponentiation and are forced to an exact zero afterwards.
    pub fn softmax_rows(
        &mut self,
        a: ValueId,
        mask: Option<&BoolMat>,
    ) -> Result<ValueId, NumericsError> {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        if let Some(m) = mask {
            if m.rows != r || m.cols != c {
                return Err(NumericsError::ShapeMismatch {
                    op: "softmax",
                    lhs: vec![r, c],
                    rhs: vec![m.rows, m.cols],
                });
            }
        }
        let mut data = vec![T::zero(); r * c];
        for row in 0..r {
            if let Some(m) = mask {
                if m.row(row).iter().all(|&keep| !keep) {
                    return Err(NumericsError::DegenerateMask { row });
                }
            }
            let xs = va.row(row);
            let penalized: Vec<f64> = (0..c)
                .map(|j| {
                    let masked = mask.map_or(false, |m| !m.get(row, j));
                    xs[j].to_f64() + if masked { MASK_PENALTY } else { 0.0 }
                })
                .collect();
            let max = penalized.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = penalized.iter().map(|&x| (x - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..c {
                let masked = mask.map_or(false, |m| !m.get(row, j));
                data[row * c + j] = if masked {
                    T::zero()
                } else {
                    T::from_f64(exps[j] / sum)
                };
            }
        }
        let needs = self.needs(a);
        self.record(
            "softmax",
            vec![r, c],
            data,
            Op::Softmax {
                a,
                mask: mask.cloned(),
            },
            needs,
        )
    }

    /// Per-row normalization to zero mean and unit variance (population),
    /// followed by an elementwise affine transform.
    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
        eps: f64,
    ) -> Result<ValueId, NumericsError> {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        if c < 2 {
            return Err(NumericsError::Config(
                "layer_norm requires feature dimension >= 2".into(),
            ));
        }
        if self.value(gain).shape() != [c] || self.value(bias).shape() != [c] {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![c],
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let mut data = vec![T::zero(); r * c];
        for row in 0..r {
            let xs = vx.row(row);
            let (mean, sigma) = row_moments(xs, eps);
            for j in 0..c {
                let xhat = (xs[j].to_f64() - mean) / sigma;
                data[row * c + j] = T::from_f64(
                    self.value(gain).data()[j].to_f64() * xhat
                        + self.value(bias).data()[j].to_f64(),
                );
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.record(
            "layer_norm",
            vec![r, c],
            data,
            Op::LayerNorm { x, gain, bias, eps },
            needs,
        )
    }

    /// out[k] = x[k] + (indicators[k] ? on_vec : off_vec).
    pub fn mark_rows(
        &mut self,
        x: ValueId,
        on_vec: ValueId,
        off_vec: ValueId,
        indicators: &[bool],
    ) -> Result<ValueId, NumericsError> {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        if indicators.len() != r {
            return Err(NumericsError::ShapeMismatch {
                op: "mark_rows",
                lhs: vec![r],
                rhs: vec![indicators.len()],
            });
        }
        if self.value(on_vec).shape() != [c] || self.value(off_vec).shape() != [c] {
            return Err(NumericsError::ShapeMismatch {
                op: "mark_rows",
                lhs: vec![c],
                rhs: self.value(on_vec).shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(r * c);
        for row in 0..r {
            let v = if indicators[row] { on_vec } else { off_vec };
            for j in 0..c {
                data.push(T::from_f64(
                    vx.row(row)[j].to_f64() + self.value(v).data()[j].to_f64(),
                ));
            }
        }
        let needs = self.needs(x) || self.needs(on_vec) || self.needs(off_vec);
        self.record(
            "mark_rows",
            vec![r, c],
            data,
            Op::MarkRows {
                x,
                on_vec,
                off_vec,
                indicators: indicators.to_vec(),
            },
            needs,
        )
    }

    /// Label-smoothed cross entropy summed over non-pad target positions.
    ///
    /// The smoothed target puts `1 - epsilon` on the gold class and
    /// `epsilon / (V - 2)` on every other non-pad class. Returns the loss
    /// node plus the unsmoothed sums needed for perplexity; the unsmoothed
    /// side is always accumulated in f64.
    pub fn cross_entropy_sum(
        &mut self,
        logits: ValueId,
        gold: &[usize],
        epsilon: f64,
        pad_id: usize,
    ) -> Result<(ValueId, LossAux), NumericsError> {
        let vl = self.value(logits);
        let (t, v) = (vl.rows(), vl.cols());
        if v < 3 {
            return Err(NumericsError::Config(format!(
                "cross_entropy: vocabulary size {v} < 3"
            )));
        }
        if gold.len() != t {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![t],
                rhs: vec![gold.len()],
            });
        }
        for &gid in gold {
            if gid >= v {
                return Err(NumericsError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: gid,
                    bound: v,
                });
            }
        }
        let mut smoothed_sum = 0.0f64;
        let mut nll_sum = 0.0f64;
        let mut count = 0usize;
        for row in 0..t {
            if gold[row] == pad_id {
                continue;
            }
            let logp = row_log_softmax(vl.row(row));
            nll_sum -= logp[gold[row]];
            let off = epsilon / (v - 2) as f64;
            let mut loss = -(1.0 - epsilon) * logp[gold[row]];
            if epsilon != 0.0 {
                for (c, &lp) in logp.iter().enumerate() {
                    if c != gold[row] && c != pad_id {
                        loss -= off * lp;
                    }
                }
            }
            smoothed_sum += loss;
            count += 1;
        }
        let needs = self.needs(logits);
        let id = self.record(
            "cross_entropy",
            vec![1],
            vec![T::from_f64(smoothed_sum)],
            Op::CrossEntropy {
                logits,
                gold: gold.to_vec(),
                epsilon,
                pad_id,
            },
            needs,
        )?;
        Ok((
            id,
            LossAux {
                smoothed_sum,
                nll_sum,
                count,
            },
        ))
    }

    /// In training, zero entries independently with probability `p` and
    /// scale survivors by 1/(1-p); in evaluation (or p = 0) this is the
    /// identity, returning the input id untouched.
    pub fn dropout(
        &mut self,
        x: ValueId,
        p: f64,
        training: bool,
        rng: &mut SeededRng,
    ) -> Result<ValueId, NumericsError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::Config(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mask_data: Vec<T> = (0..self.value(x).numel())
            .map(|_| {
                if rng.bernoulli(p) {
                    T::zero()
                } else {
                    T::from_f64(keep_scale)
                }
            })
            .collect();
        let mask = Tensor::new(self.value(x).shape().to_vec(), mask_data)?;
        let mask_id = self.constant(mask);
        self.mul(x, mask_id)
    }

    /// Reverse sweep from a scalar loss. Gradients land on every node that
    /// needs them and are readable through [`Graph::grad`].
    pub fn backward(&mut self, loss: ValueId) -> Result<(), NumericsError> {
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::Config(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(()); // nothing requires gradient
        }
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(out_grad) = grads[idx].take() else {
                continue;
            };
            if !out_grad.iter().all(|g| g.is_finite()) {
                return Err(NumericsError::NonFinite { op: "backward" });
            }
            let op = self.nodes[idx].op.clone();
            self.backward_op(&op, idx, &out_grad, &mut grads)?;
            if self.nodes[idx].needs_grad {
                let node = &mut self.nodes[idx];
                debug_assert_eq!(out_grad.len(), node.value.numel());
                node.value.grad = Some(out_grad);
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], id: ValueId, contrib: Vec<T>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e = T::from_f64(e.to_f64() + c.to_f64());
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn backward_op(
        &mut self,
        op: &Op,
        idx: usize,
        d_out: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<(), NumericsError> {
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(grads, *a, d_out.to_vec());
                self.accumulate(grads, *b, d_out.to_vec());
            }
            Op::AddRow { a, bias } => {
                self.accumulate(grads, *a, d_out.to_vec());
                let c = self.value(*bias).numel();
                let mut db = vec![T::zero(); c];
                for (j, &g) in d_out.iter().enumerate() {
                    let col = j % c;
                    db[col] = T::from_f64(db[col].to_f64() + g.to_f64());
                }
                self.accumulate(grads, *bias, db);
            }
            Op::Mul { a, b } => {
                let da: Vec<T> = d_out
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(&g, &y)| T::from_f64(g.to_f64() * y.to_f64()))
                    .collect();
                let db: Vec<T> = d_out
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&g, &x)| T::from_f64(g.to_f64() * x.to_f64()))
                    .collect();
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale { a, factor } => {
                let da = d_out
                    .iter()
                    .map(|&g| T::from_f64(g.to_f64() * factor))
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                // dA = dC . B^T
                let mut bt = vec![T::zero(); k * n];
                transpose_into(self.value(*b).data(), k, n, &mut bt);
                let mut da = vec![T::zero(); m * k];
                matmul_into(d_out, &bt, m, n, k, &mut da);
                self.accumulate(grads, *a, da);
                // dB = A^T . dC
                let mut at = vec![T::zero(); m * k];
                transpose_into(self.value(*a).data(), m, k, &mut at);
                let mut db = vec![T::zero(); k * n];
                matmul_into(&at, d_out, k, m, n, &mut db);
                self.accumulate(grads, *b, db);
            }
            Op::Transpose { a } => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                let mut da = vec![T::zero(); r * c];
                transpose_into(d_out, c, r, &mut da);
                self.accumulate(grads, *a, da);
            }
            Op::Relu { a } => {
                let da = d_out
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::GatherRows { a, indices } => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                let mut da = vec![T::zero(); r * c];
                for (out_row, &src_row) in indices.iter().enumerate() {
                    for j in 0..c {
                        let slot = &mut da[src_row * c + j];
                        *slot = T::from_f64(slot.to_f64() + d_out[out_row * c + j].to_f64());
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::SliceCols { a, start, len } => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                let mut da = vec![T::zero(); r * c];
                for row in 0..r {
                    for j in 0..*len {
                        da[row * c + start + j] = d_out[row * len + j];
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::ConcatCols { parts } => {
                let r = self.value(ValueId(idx)).rows();
                let total = self.value(ValueId(idx)).cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    let mut dp = vec![T::zero(); r * pc];
                    for row in 0..r {
                        dp[row * pc..(row + 1) * pc].copy_from_slice(
                            &d_out[row * total + offset..row * total + offset + pc],
                        );
                    }
                    self.accumulate(grads, p, dp);
                    offset += pc;
                }
            }
            Op::Softmax { a, .. } => {
                // dx_j = y_j * (dy_j - sum_k y_k dy_k); masked outputs are 0
                // so their gradient vanishes with them.
                let y = self.value(ValueId(idx));
                let (r, c) = (y.rows(), y.cols());
                let mut da = vec![T::zero(); r * c];
                for row in 0..r {
                    let yr = y.row(row);
                    let dr = &d_out[row * c..(row + 1) * c];
                    let dot: f64 = yr
                        .iter()
                        .zip(dr)
                        .map(|(&yv, &gv)| yv.to_f64() * gv.to_f64())
                        .sum();
                    for j in 0..c {
                        da[row * c + j] =
                            T::from_f64(yr[j].to_f64() * (dr[j].to_f64() - dot));
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let vx = self.value(*x);
                let (r, c) = (vx.rows(), vx.cols());
                let gain_data: Vec<f64> =
                    self.value(*gain).data().iter().map(|g| g.to_f64()).collect();
                let mut dx = vec![T::zero(); r * c];
                let mut dgain = vec![0.0f64; c];
                let mut dbias = vec![0.0f64; c];
                for row in 0..r {
                    let xs = vx.row(row);
                    let (mean, sigma) = row_moments(xs, *eps);
                    let xhat: Vec<f64> =
                        xs.iter().map(|&v| (v.to_f64() - mean) / sigma).collect();
                    let dr = &d_out[row * c..(row + 1) * c];
                    let g: Vec<f64> = dr
                        .iter()
                        .zip(&gain_data)
                        .map(|(&d, &gv)| d.to_f64() * gv)
                        .collect();
                    let g_mean: f64 = g.iter().sum::<f64>() / c as f64;
                    let gx_mean: f64 =
                        g.iter().zip(&xhat).map(|(&gv, &xv)| gv * xv).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[row * c + j] =
                            T::from_f64((g[j] - g_mean - xhat[j] * gx_mean) / sigma);
                        dgain[j] += dr[j].to_f64() * xhat[j];
                        dbias[j] += dr[j].to_f64();
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain.iter().map(|&g| T::from_f64(g)).collect());
                self.accumulate(grads, *bias, dbias.iter().map(|&g| T::from_f64(g)).collect());
            }
            Op::MarkRows {
                x,
                on_vec,
                off_vec,
                indicators,
            } => {
                let c = self.value(*on_vec).numel();
                self.accumulate(grads, *x, d_out.to_vec());
                let mut don = vec![T::zero(); c];
                let mut doff = vec![T::zero(); c];
                for (row, &on) in indicators.iter().enumerate() {
                    let target = if on { &mut don } else { &mut doff };
                    for j in 0..c {
                        target[j] =
                            T::from_f64(target[j].to_f64() + d_out[row * c + j].to_f64());
                    }
                }
                self.accumulate(grads, *on_vec, don);
                self.accumulate(grads, *off_vec, doff);
            }
            Op::CrossEntropy {
                logits,
                gold,
                epsilon,
                pad_id,
            } => {
                let vl = self.value(*logits);
                let (t, v) = (vl.rows(), vl.cols());
                let g = d_out[0].to_f64();
                let off = epsilon / (v - 2) as f64;
                let mut dl = vec![T::zero(); t * v];
                for row in 0..t {
                    if gold[row] == *pad_id {
                        continue;
                    }
                    let logp = row_log_softmax(vl.row(row));
                    for c in 0..v {
                        let target = if c == gold[row] {
                            1.0 - epsilon
                        } else if c == *pad_id {
                            0.0
                        } else {
                            off
                        };
                        dl[row * v + c] = T::from_f64(g * (logp[c].exp() - target));
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
        }
        Ok(())
    }
}

fn row_moments<T: Real>(xs: &[T], eps: f64) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|x| x.to_f64()).sum::<f64>() / n;
    let var = xs
        .iter()
        .map(|x| {
            let d = x.to_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, (var + eps).sqrt())
}

fn row_log_softmax<T: Real>(xs: &[T]) -> Vec<f64> {
    let max = xs
        .iter()
        .map(|x| x.to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + xs.iter()
            .map(|x| (x.to_f64() - max).exp())
            .sum::<f64>()
            .ln();
    xs.iter().map(|x| x.to_f64() - lse).collect()
}

/// Mean label-smoothed cross entropy over non-pad positions, as used for a
/// single training example or a whole teacher-forced batch.
pub fn cross_entropy_smoothed<T: Real>(
    g: &mut Graph<T>,
    logits: ValueId,
    gold: &[usize],
    epsilon: f64,
    pad_id: usize,
) -> Result<(ValueId, LossAux), NumericsError> {
    let (sum_id, aux) = g.cross_entropy_sum(logits, gold, epsilon, pad_id)?;
    if aux.count == 0 {
        return Err(NumericsError::Config(
            "cross_entropy: no non-pad target tokens".into(),
        ));
    }
    let mean = g.scale(sum_id, 1.0 / aux.count as f64)?;
    Ok((mean, aux))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let a = g.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let out = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_inner_product() {
        let mut g = Graph::new();
        let a = g.constant(t2(&[&[1.0, 2.0]]));
        let b = g.constant(t2(&[&[3.0], &[4.0]]));
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut g = Graph::new();
        let x = g.constant(t2(&[&[0.0, 0.0, 0.0]]));
        let y = g.softmax_rows(x, None).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_direct_exponentiation_oracle() {
        // exp(1), exp(2), exp(3) normalized, computed independently.
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
        let z: f64 = e.iter().sum();
        let expected: Vec<f64> = e.iter().map(|v| v / z).collect();

        let mut g = Graph::new();
        let x = g.constant(t2(&[&[1.0, 2.0, 3.0]]));
        let y = g.softmax_rows(x, None).unwrap();
        for (got, want) in g.value(y).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
        // frozen reference values
        assert!((g.value(y).data()[0] - 0.09003).abs() < 1e-5);
        assert!((g.value(y).data()[1] - 0.24473).abs() < 1e-5);
        assert!((g.value(y).data()[2] - 0.66524).abs() < 1e-5);
    }

    #[test]
    fn softmax_single_unmasked_entry_is_exactly_one() {
        let mut g = Graph::new();
        let x = g.constant(t2(&[&[5.0, 123.0]]));
        let mask = BoolMat::from_fn(1, 2, |_, c| c == 0);
        let y = g.softmax_rows(x, Some(&mask)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_is_error() {
        let mut g = Graph::new();
        let x = g.constant(t2(&[&[1.0, 2.0]]));
        let mask = BoolMat::filled(1, 2, false);
        assert!(matches!(
            g.softmax_rows(x, Some(&mask)),
            Err(NumericsError::DegenerateMask { row: 0 })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(t2(&[&[0.3, -2.0, 5.0, 1.1], &[9.0, 9.0, -3.0, 0.0]]));
        let mask = BoolMat::from_fn(2, 4, |r, c| !(r == 1 && c == 0));
        let y = g.softmax_rows(x, Some(&mask)).unwrap();
        for row in 0..2 {
            let s: f64 = g.value(y).row(row).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert_eq!(g.value(y).get2(1, 0), 0.0);
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_bias() {
        let mut g = Graph::new();
        let x = g.constant(t2(&[&[4.2, 4.2, 4.2]]));
        let gain = g.constant(Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap());
        let bias = g.constant(Tensor::zeros(vec![3]));
        let y = g.layer_norm(x, gain, bias, 1e-6).unwrap();
        for &v in g.value(y).data() {
            assert!(v.abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        // mean 2, population std 1 -> [-1, 1] as eps -> 0
        let mut g = Graph::new();
        let x = g.constant(t2(&[&[1.0, 3.0]]));
        let gain = g.constant(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let bias = g.constant(Tensor::zeros(vec![2]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        assert!((g.value(y).data()[0] + 1.0).abs() < 1e-5);
        assert!((g.value(y).data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn dropout_eval_and_p0_are_identity() {
        let mut g = Graph::new();
        let mut rng = SeededRng::new(3);
        let x = g.constant(t2(&[&[1.0, -2.0, 3.0]]));
        assert_eq!(g.dropout(x, 0.4, false, &mut rng).unwrap(), x);
        assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    }

    #[test]
    fn dropout_p_one_rejected() {
        let mut g = Graph::new();
        let mut rng = SeededRng::new(3);
        let x = g.constant(t2(&[&[1.0]]));
        assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut g = Graph::new();
        let mut rng = SeededRng::new(11);
        let n = 100_000;
        let x = g.constant(Tensor::new(vec![1, n], vec![1.0f64; n]).unwrap());
        let y = g.dropout(x, 0.4, true, &mut rng).unwrap();
        let mean: f64 = g.value(y).data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(vec![1, 5]));
        let (loss, aux) = cross_entropy_smoothed(&mut g, logits, &[2], 0.1, 0).unwrap();
        assert!((g.value(loss).item() - 5.0f64.ln()).abs() < 1e-9);
        assert_eq!(aux.count, 1);
        assert!((aux.nll_sum - 5.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_zero_epsilon_is_plain_nll() {
        let mut g = Graph::new();
        let logits = g.constant(t2(&[&[2.0, -1.0, 0.5, 0.0]]));
        let (loss, aux) = cross_entropy_smoothed(&mut g, logits, &[1], 0.0, 0).unwrap();
        assert!((g.value(loss).item() - aux.nll_sum).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_hand_computed_target() {
        // V=4, logits [2,0,0,0], gold 0, eps 0.1, pad 3:
        // target [0.9, 0.05, 0.05, 0]; oracle computed by direct summation.
        let logits_row = [2.0f64, 0.0, 0.0, 0.0];
        let logp = {
            let z: f64 = logits_row.iter().map(|x| x.exp()).sum();
            logits_row.iter().map(|x| x - z.ln()).collect::<Vec<_>>()
        };
        let oracle = -(0.9 * logp[0] + 0.05 * logp[1] + 0.05 * logp[2]);

        let mut g = Graph::new();
        let logits = g.constant(t2(&[&logits_row]));
        let (loss, _) = cross_entropy_smoothed(&mut g, logits, &[0], 0.1, 3).unwrap();
        assert!((g.value(loss).item() - oracle).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_small_vocab_rejected() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(vec![1, 2]));
        assert!(g.cross_entropy_sum(logits, &[0], 0.1, 0).is_err());
    }

    #[test]
    fn cross_entropy_pad_positions_excluded() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(vec![3, 5]));
        let (_, aux) = g.cross_entropy_sum(logits, &[1, 0, 2], 0.1, 0).unwrap();
        assert_eq!(aux.count, 2);
    }

    #[test]
    fn backward_add_and_scale() {
        let mut g = Graph::new();
        let x = g.leaf(t2(&[&[1.0, 2.0]]).with_grad());
        let doubled = g.scale(x, 2.0).unwrap();
        let ones = g.constant(t2(&[&[1.0], &[1.0]]));
        let summed = g.matmul(doubled, ones).unwrap();
        g.backward(summed).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn frozen_leaves_get_no_grad() {
        let mut g = Graph::new();
        let table = g.leaf(t2(&[&[1.0, 2.0], &[3.0, 4.0]])); // requires_grad = false
        let rowv = g.gather_rows(table, &[1]).unwrap();
        let ones = g.constant(t2(&[&[1.0], &[1.0]]));
        let loss = g.matmul(rowv, ones).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(table).is_none());
        assert!(g.grad(rowv).is_none());
    }

    #[test]
    fn gather_repeated_rows_accumulates() {
        let mut g = Graph::new();
        let table = g.leaf(t2(&[&[1.0, 2.0], &[3.0, 4.0]]).with_grad());
        let picked = g.gather_rows(table, &[0, 0]).unwrap();
        assert_eq!(g.value(picked).row(0), g.value(picked).row(1));
        let ones = g.constant(t2(&[&[1.0], &[1.0]]));
        let col = g.matmul(picked, ones).unwrap();
        let onesr = g.constant(t2(&[&[1.0, 1.0]]));
        let loss = g.matmul(onesr, col).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(table).unwrap(), &[2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_out_of_range() {
        let mut g = Graph::new();
        let table = g.constant(t2(&[&[1.0, 2.0]]));
        assert!(g.gather_rows(table, &[3]).is_err());
    }

    #[test]
    fn non_finite_forward_is_error() {
        let mut g = Graph::new();
        let x = g.constant(t2(&[&[1e308, 1e308]]));
        assert!(matches!(
            g.add(x, x),
            Err(NumericsError::NonFinite { .. })
        ));
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut g = Graph::new();
        let x = g.constant(t2(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let a = g.slice_cols(x, 0, 1).unwrap();
        let b = g.slice_cols(x, 1, 2).unwrap();
        let back = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }
}

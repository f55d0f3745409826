//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Operations execute eagerly and record themselves on a [`Tape`]. Calling
//! [`Tape::backward`] on a scalar walks the recorded operations in reverse
//! and accumulates gradients into every tensor that requires them. The tape
//! is an arena: tensors are plain indices ([`TensorId`]) into it, which keeps
//! ownership flat and makes every backward rule a direct array manipulation.
//!
//! Broadcasting is deliberately minimal: row-wise bias addition and last-axis
//! softmax/layer-norm are the only shape-bending operations, which is all a
//! small encoder-decoder transformer needs.

use thiserror::Error;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Errors raised by tensor operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("second backward without re-forward or grad reset")]
    BackwardTwice,
    #[error("cross_entropy target is entirely padding")]
    AllPadTarget,
    #[error("target id {id} out of vocabulary range {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },
    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },
}

/// A detached, tape-free 2-D snapshot of tensor data (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    Add(TensorId, TensorId),
    AddBiasRow(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    Relu(TensorId),
    Softmax(TensorId),
    MaskedSoftmax(TensorId),
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, eps: f64 },
    CrossEntropy { logits: TensorId, targets: Vec<usize>, pad_id: usize },
    GatherRows { table: TensorId, ids: Vec<usize> },
    SliceCols { x: TensorId, start: usize, width: usize },
    ConcatCols(Vec<TensorId>),
    Transpose(TensorId),
    Sum(TensorId),
    MeanScalars(Vec<TensorId>),
    Dropout { x: TensorId, mask: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed operations; owns all tensor storage.
///
/// Execution order is topological by construction (an operation's inputs
/// must already exist on the tape), so backward is a single reverse scan.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn rows_of(shape: &[usize]) -> usize {
    if shape.is_empty() {
        1
    } else {
        shape[..shape.len() - 1].iter().product::<usize>().max(1)
    }
}

fn last_of(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
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

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].data.len()
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.numel(id), 1);
        self.nodes[id.0].data[0]
    }

    /// 2-D snapshot of a tensor's current data.
    pub fn matrix(&self, id: TensorId) -> Matrix {
        let n = &self.nodes[id.0];
        assert_eq!(n.shape.len(), 2, "matrix() requires a 2-D tensor");
        Matrix { rows: n.shape[0], cols: n.shape[1], data: n.data.clone() }
    }

    /// 2-D snapshot of a tensor's gradient, if populated.
    pub fn grad_matrix(&self, id: TensorId) -> Option<Matrix> {
        let n = &self.nodes[id.0];
        let g = n.grad.as_ref()?;
        assert_eq!(n.shape.len(), 2);
        Some(Matrix { rows: n.shape[0], cols: n.shape[1], data: g.clone() })
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.backward_done = false;
        self.nodes.push(Node { shape, data, grad: None, requires_grad, op });
        TensorId(self.nodes.len() - 1)
    }

    fn check_finite(&self, id: TensorId, op: &'static str) -> Result<TensorId, TensorError> {
        if cfg!(debug_assertions) && !self.nodes[id.0].data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        Ok(id)
    }

    fn any_requires(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Register a new leaf tensor.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        self.push(shape, data, requires_grad, Op::Leaf)
    }

    /// Register a constant (non-differentiable) leaf.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> TensorId {
        self.leaf(data, shape, false)
    }

    pub fn leaf_from_matrix(&mut self, m: &Matrix, requires_grad: bool) -> TensorId {
        self.leaf(m.data.clone(), vec![m.rows, m.cols], requires_grad)
    }

    /// Copy a tensor's data into a fresh leaf, cutting it out of the graph.
    ///
    /// This is how an encoder output becomes the differentiable input of a
    /// decoder-only subgraph: the leaf receives `∂L/∂leaf` during backward
    /// while nothing upstream of the original tensor sees any gradient.
    pub fn detach(&mut self, id: TensorId, requires_grad: bool) -> TensorId {
        let shape = self.nodes[id.0].shape.clone();
        let data = self.nodes[id.0].data.clone();
        self.push(shape, data, requires_grad, Op::Leaf)
    }

    /// Matrix product of 2-D tensors `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.any_requires(&[a, b]);
        let id = self.push(vec![m, n], out, rg, Op::Matmul(a, b));
        self.check_finite(id, "matmul")
    }

    /// Elementwise sum of same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} + {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.any_requires(&[a, b]);
        let id = self.push(shape, out, rg, Op::Add(a, b));
        self.check_finite(id, "add")
    }

    /// Add a `[c]` bias vector to every row of a `[r×c]` tensor.
    pub fn add_bias_row(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId, TensorError> {
        let sx = self.nodes[x.0].shape.clone();
        let sb = &self.nodes[bias.0].shape;
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias_row",
                detail: format!("{sx:?} + {sb:?}"),
            });
        }
        let c = sx[1];
        let mut out = self.nodes[x.0].data.clone();
        for (i, v) in out.iter_mut().enumerate() {
            *v += self.nodes[bias.0].data[i % c];
        }
        let rg = self.any_requires(&[x, bias]);
        let id = self.push(sx, out, rg, Op::AddBiasRow(x, bias));
        self.check_finite(id, "add_bias_row")
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} * {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.any_requires(&[a, b]);
        let id = self.push(shape, out, rg, Op::Mul(a, b));
        self.check_finite(id, "mul")
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId, TensorError> {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        let id = self.push(shape, out, rg, Op::Scale(x, c));
        self.check_finite(id, "scale")
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        let id = self.push(shape, out, rg, Op::Relu(x));
        self.check_finite(id, "relu")
    }

    /// Softmax along the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        let (r, c) = (rows_of(&shape), last_of(&shape));
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.nodes[x.0].data[i * c..(i + 1) * c];
            softmax_row(row, &mut out[i * c..(i + 1) * c]);
        }
        let rg = self.nodes[x.0].requires_grad;
        let id = self.push(shape, out, rg, Op::Softmax(x));
        self.check_finite(id, "softmax")
    }

    /// Softmax along the last axis where `mask[i] == false` entries get
    /// exactly zero weight. Errors if any row is fully masked.
    pub fn masked_softmax(&mut self, x: TensorId, mask: &[bool]) -> Result<TensorId, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        if mask.len() != self.nodes[x.0].data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                detail: format!("mask len {} vs {:?}", mask.len(), shape),
            });
        }
        let (r, c) = (rows_of(&shape), last_of(&shape));
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.nodes[x.0].data[i * c..(i + 1) * c];
            let mrow = &mask[i * c..(i + 1) * c];
            if !mrow.iter().any(|&m| m) {
                return Err(TensorError::FullyMaskedRow { row: i });
            }
            masked_softmax_row(row, mrow, &mut out[i * c..(i + 1) * c]);
        }
        let rg = self.nodes[x.0].requires_grad;
        let id = self.push(shape, out, rg, Op::MaskedSoftmax(x));
        self.check_finite(id, "masked_softmax")
    }

    /// Per-row normalization over the last axis followed by an affine map.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        let d = last_of(&shape);
        if self.nodes[gain.0].shape != [d] || self.nodes[bias.0].shape != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    shape, self.nodes[gain.0].shape, self.nodes[bias.0].shape
                ),
            });
        }
        let r = rows_of(&shape);
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &self.nodes[x.0].data[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                out[i * d + j] = self.nodes[gain.0].data[j] * xh + self.nodes[bias.0].data[j];
            }
        }
        let rg = self.any_requires(&[x, gain, bias]);
        let id = self.push(shape, out, rg, Op::LayerNorm { x, gain, bias, eps });
        self.check_finite(id, "layer_norm")
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits [T×V]`, skipping positions whose target is `pad_id`.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        pad_id: usize,
    ) -> Result<TensorId, TensorError> {
        let shape = self.nodes[logits.0].shape.clone();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("logits {:?} vs {} targets", shape, targets.len()),
            });
        }
        let (t_len, vocab) = (shape[0], shape[1]);
        let mut non_pad = 0usize;
        let mut total = 0.0;
        for t in 0..t_len {
            if targets[t] == pad_id {
                continue;
            }
            if targets[t] >= vocab {
                return Err(TensorError::TargetOutOfRange { id: targets[t], vocab });
            }
            non_pad += 1;
            let row = &self.nodes[logits.0].data[t * vocab..(t + 1) * vocab];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[t]];
        }
        if non_pad == 0 {
            return Err(TensorError::AllPadTarget);
        }
        let loss = total / non_pad as f64;
        let rg = self.nodes[logits.0].requires_grad;
        let id = self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy { logits, targets: targets.to_vec(), pad_id },
        );
        self.check_finite(id, "cross_entropy")
    }

    /// Row lookup `table[ids] -> [len(ids)×d]`; duplicate ids accumulate
    /// gradient into the same table row.
    pub fn gather_rows(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId, TensorError> {
        let shape = self.nodes[table.0].shape.clone();
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                detail: format!("table {shape:?}"),
            });
        }
        let (v, d) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(TensorError::TargetOutOfRange { id: i, vocab: v });
            }
            out.extend_from_slice(&self.nodes[table.0].data[i * d..(i + 1) * d]);
        }
        let rg = self.nodes[table.0].requires_grad;
        let id = self.push(
            vec![ids.len(), d],
            out,
            rg,
            Op::GatherRows { table, ids: ids.to_vec() },
        );
        self.check_finite(id, "gather_rows")
    }

    /// Column slice `x[:, start..start+width]` of a 2-D tensor.
    pub fn slice_cols(
        &mut self,
        x: TensorId,
        start: usize,
        width: usize,
    ) -> Result<TensorId, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 2 || start + width > shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("{shape:?} cols {start}..{}", start + width),
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&self.nodes[x.0].data[i * c + start..i * c + start + width]);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![r, width], out, rg, Op::SliceCols { x, start, width }))
    }

    /// Horizontal concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                detail: "no inputs".into(),
            });
        }
        let r = self.nodes[parts[0].0].shape[0];
        let mut total = 0;
        for &p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != 2 || s[0] != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("{s:?} with {r} rows expected"),
                });
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.nodes[p.0].shape[1];
                out.extend_from_slice(&self.nodes[p.0].data[i * c..(i + 1) * c]);
            }
        }
        let rg = self.any_requires(parts);
        Ok(self.push(vec![r, total], out, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                detail: format!("{shape:?}"),
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.nodes[x.0].data[i * c + j];
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![c, r], out, rg, Op::Transpose(x)))
    }

    /// Sum of all elements, producing a `[1]` scalar.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let total: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        let id = self.push(vec![1], vec![total], rg, Op::Sum(x));
        self.check_finite(id, "sum")
    }

    /// Mean of single-element tensors, producing a `[1]` scalar.
    pub fn mean_scalars(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "mean_scalars",
                detail: "no inputs".into(),
            });
        }
        let mut total = 0.0;
        for &p in parts {
            if self.numel(p) != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "mean_scalars",
                    detail: format!("{:?} is not scalar", self.nodes[p.0].shape),
                });
            }
            total += self.nodes[p.0].data[0];
        }
        let mean = total / parts.len() as f64;
        let rg = self.any_requires(parts);
        let id = self.push(vec![1], vec![mean], rg, Op::MeanScalars(parts.to_vec()));
        self.check_finite(id, "mean_scalars")
    }

    /// Inverted dropout with a caller-supplied keep mask of `0.0` or
    /// `1/(1-p)` entries; backward reuses the identical mask.
    pub fn dropout(&mut self, x: TensorId, mask: Vec<f64>) -> Result<TensorId, TensorError> {
        if mask.len() != self.nodes[x.0].data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "dropout",
                detail: format!("mask len {}", mask.len()),
            });
        }
        let out: Vec<f64> =
            self.nodes[x.0].data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        let id = self.push(shape, out, rg, Op::Dropout { x, mask });
        self.check_finite(id, "dropout")
    }

    /// Reverse pass from a scalar loss. Fills `grad` on every tensor with
    /// `requires_grad` that the loss depends on. Erroring on a repeat call
    /// guards against stale-graph reuse; see [`Tape::reset_grads`].
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.numel(loss) != 1 {
            return Err(TensorError::NotScalar(self.nodes[loss.0].shape.clone()));
        }
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        self.backward_done = true;

        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(loss.0 + 1);
        for node in self.nodes.iter().take(loss.0 + 1) {
            grads.push(vec![0.0; node.data.len()]);
        }
        grads[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            self.propagate(i, &g, &mut grads);
            grads[i] = g;
        }

        for (i, g) in grads.into_iter().enumerate() {
            if self.nodes[i].requires_grad {
                self.nodes[i].grad = Some(g);
            }
        }
        Ok(())
    }

    /// Clear all gradients and re-arm backward, restoring the post-forward
    /// state so a replayed backward pass can be compared bit-for-bit.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.nodes[a.0].requires_grad {
                    // dA += dC · Bᵀ
                    let da = &mut grads[a.0];
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[r * n + j] * self.nodes[b.0].data[p * n + j];
                            }
                            da[r * k + p] += s;
                        }
                    }
                }
                if self.nodes[b.0].requires_grad {
                    // dB += Aᵀ · dC
                    let db = &mut grads[b.0];
                    for p in 0..k {
                        for r in 0..m {
                            let av = self.nodes[a.0].data[r * k + p];
                            if av != 0.0 {
                                for j in 0..n {
                                    db[p * n + j] += av * g[r * n + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for &src in &[a, b] {
                    if self.nodes[src.0].requires_grad {
                        for (dst, &gv) in grads[src.0].iter_mut().zip(g) {
                            *dst += gv;
                        }
                    }
                }
            }
            Op::AddBiasRow(x, bias) => {
                if self.nodes[x.0].requires_grad {
                    for (dst, &gv) in grads[x.0].iter_mut().zip(g) {
                        *dst += gv;
                    }
                }
                if self.nodes[bias.0].requires_grad {
                    let c = self.nodes[bias.0].shape[0];
                    for (idx, &gv) in g.iter().enumerate() {
                        grads[bias.0][idx % c] += gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    for idx in 0..g.len() {
                        grads[a.0][idx] += g[idx] * self.nodes[b.0].data[idx];
                    }
                }
                if self.nodes[b.0].requires_grad {
                    for idx in 0..g.len() {
                        grads[b.0][idx] += g[idx] * self.nodes[a.0].data[idx];
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.nodes[x.0].requires_grad {
                    for (dst, &gv) in grads[x.0].iter_mut().zip(g) {
                        *dst += gv * c;
                    }
                }
            }
            Op::Relu(x) => {
                if self.nodes[x.0].requires_grad {
                    for idx in 0..g.len() {
                        if self.nodes[x.0].data[idx] > 0.0 {
                            grads[x.0][idx] += g[idx];
                        }
                    }
                }
            }
            Op::Softmax(x) | Op::MaskedSoftmax(x) => {
                // dx = s ⊙ (dy − Σ(dy ⊙ s)); masked entries have s == 0 and
                // therefore receive no gradient.
                if self.nodes[x.0].requires_grad {
                    let shape = &self.nodes[i].shape;
                    let (r, c) = (rows_of(shape), last_of(shape));
                    let s = &self.nodes[i].data;
                    for row in 0..r {
                        let mut dot = 0.0;
                        for j in 0..c {
                            dot += g[row * c + j] * s[row * c + j];
                        }
                        for j in 0..c {
                            grads[x.0][row * c + j] +=
                                s[row * c + j] * (g[row * c + j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let shape = &self.nodes[x.0].shape;
                let (r, d) = (rows_of(shape), last_of(shape));
                let df = d as f64;
                for row in 0..r {
                    let xrow = &self.nodes[x.0].data[row * d..(row + 1) * d];
                    let mean = xrow.iter().sum::<f64>() / df;
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / df;
                    let inv = 1.0 / (var + eps).sqrt();
                    let grow = &g[row * d..(row + 1) * d];
                    // Accumulate affine-parameter grads first.
                    for j in 0..d {
                        let xh = (xrow[j] - mean) * inv;
                        if self.nodes[gain.0].requires_grad {
                            grads[gain.0][j] += grow[j] * xh;
                        }
                        if self.nodes[bias.0].requires_grad {
                            grads[bias.0][j] += grow[j];
                        }
                    }
                    if self.nodes[x.0].requires_grad {
                        // dx = inv/d · (d·h − Σh − x̂·Σ(h ⊙ x̂)), h = g ⊙ gain
                        let mut sum_h = 0.0;
                        let mut sum_hx = 0.0;
                        for j in 0..d {
                            let h = grow[j] * self.nodes[gain.0].data[j];
                            let xh = (xrow[j] - mean) * inv;
                            sum_h += h;
                            sum_hx += h * xh;
                        }
                        for j in 0..d {
                            let h = grow[j] * self.nodes[gain.0].data[j];
                            let xh = (xrow[j] - mean) * inv;
                            grads[x.0][row * d + j] +=
                                inv / df * (df * h - sum_h - xh * sum_hx);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, pad_id } => {
                if self.nodes[logits.0].requires_grad {
                    let vocab = self.nodes[logits.0].shape[1];
                    let non_pad = targets.iter().filter(|&&t| t != *pad_id).count() as f64;
                    let gl = g[0] / non_pad;
                    for (t, &target) in targets.iter().enumerate() {
                        if target == *pad_id {
                            continue;
                        }
                        let row = &self.nodes[logits.0].data[t * vocab..(t + 1) * vocab];
                        let mut probs = vec![0.0; vocab];
                        softmax_row(row, &mut probs);
                        for j in 0..vocab {
                            let indicator = if j == target { 1.0 } else { 0.0 };
                            grads[logits.0][t * vocab + j] += gl * (probs[j] - indicator);
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if self.nodes[table.0].requires_grad {
                    let d = self.nodes[table.0].shape[1];
                    for (t, &row) in ids.iter().enumerate() {
                        for j in 0..d {
                            grads[table.0][row * d + j] += g[t * d + j];
                        }
                    }
                }
            }
            Op::SliceCols { x, start, width } => {
                if self.nodes[x.0].requires_grad {
                    let c = self.nodes[x.0].shape[1];
                    let r = self.nodes[x.0].shape[0];
                    for row in 0..r {
                        for j in 0..*width {
                            grads[x.0][row * c + start + j] += g[row * width + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let r = self.nodes[i].shape[0];
                let total = self.nodes[i].shape[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p.0].shape[1];
                    if self.nodes[p.0].requires_grad {
                        for row in 0..r {
                            for j in 0..c {
                                grads[p.0][row * c + j] += g[row * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Transpose(x) => {
                if self.nodes[x.0].requires_grad {
                    let (r, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    for row in 0..r {
                        for j in 0..c {
                            grads[x.0][row * c + j] += g[j * r + row];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.nodes[x.0].requires_grad {
                    for dst in grads[x.0].iter_mut() {
                        *dst += g[0];
                    }
                }
            }
            Op::MeanScalars(parts) => {
                let n = parts.len() as f64;
                for &p in parts {
                    if self.nodes[p.0].requires_grad {
                        grads[p.0][0] += g[0] / n;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.nodes[x.0].requires_grad {
                    for idx in 0..g.len() {
                        grads[x.0][idx] += g[idx] * mask[idx];
                    }
                }
            }
        }
    }
}

/// Row-major `A[m×k] · B[k×n]` into a fresh buffer.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn masked_softmax_row(row: &[f64], mask: &[bool], out: &mut [f64]) {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold(f64::NEG_INFINITY, |acc, (&v, _)| acc.max(v));
    let mut sum = 0.0;
    for j in 0..row.len() {
        if mask[j] {
            out[j] = (row[j] - max).exp();
            sum += out[j];
        } else {
            out[j] = 0.0;
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

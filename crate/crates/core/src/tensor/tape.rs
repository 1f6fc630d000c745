use super::{ParamId, Result, Tensor, TensorError, LAYER_NORM_EPS};
use crate::matrix::Real;
use crate::rng::DropoutKey;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    Softmax(Var),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Dropout(Var, Vec<f64>),
    L2Normalize(Var, Vec<f64>),
    SparseAttention {
        scores: Var,
        values: Var,
        support: Vec<Vec<usize>>,
        weights: Vec<Vec<f64>>,
        inv_temp: f64,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    Dice {
        logits: Var,
        targets: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Records operations in execution order and replays them backwards.
///
/// A tape created with [`Tape::no_grad`] evaluates the same operations but
/// keeps no backward information; calling [`Tape::backward`] on it fails.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    recording: bool,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument { op, msg: msg.into() }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `a (m×k) · b (k×n)` with arbitrary strides into a fresh `m×n` buffer.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    f64::gemm(m, k, n, a, rsa, csa, b, rsb, csb, &mut c, n, 1);
    c
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
            backward_done: false,
        }
    }

    /// Forward-only tape: values are computed, nothing is retained for
    /// backward.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated for `v` by the last [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds a leaf. It takes part in backward iff `t.requires_grad` and the
    /// tape is recording.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad && self.recording;
        self.nodes.push(Node {
            value: Tensor {
                requires_grad: rg,
                grad: None,
                ..t
            },
            op: Op::Leaf,
            requires_grad: rg,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub(crate) fn param_leaf(&mut self, t: &Tensor, id: ParamId) -> Var {
        let v = self.leaf(Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            requires_grad: true,
            grad: None,
        });
        self.nodes[v.0].param = Some(id);
        v
    }

    pub(crate) fn param_of(&self, v: Var) -> Option<ParamId> {
        self.nodes[v.0].param
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let rg = self.recording && inputs.iter().any(|&v| self.rg(v));
        let op = if rg { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad: rg,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (kb, n) = self.dims(b);
        if k != kb {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let out = gemm(m, k, n, self.value(a).data(), k, 1, self.value(b).data(), n, 1);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push("transpose", Tensor::new(vec![n, m], out)?, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("add", Tensor::new(shape, data)?, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", Tensor::new(shape, data)?, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", Tensor::new(shape, data)?, Op::Scale(a, c), &[a])
    }

    /// `a · s` for a one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(mismatch("scale_by", self.shape(a), self.shape(s)));
        }
        let c = self.value(s).item();
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale_by", Tensor::new(shape, data)?, Op::ScaleBy(a, s), &[a, s])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat_rows", "no inputs"))?;
        let cols = self.dims(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(mismatch("concat_rows", self.shape(first), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        self.push(
            "concat_rows",
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat_cols", "no inputs"))?;
        let rows = self.dims(first).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(mismatch("concat_cols", self.shape(first), self.shape(p)));
            }
            total += c;
        }
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let (_, c) = self.dims(p);
            let src = self.value(p).data();
            for i in 0..rows {
                data[i * total + off..i * total + off + c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            off += c;
        }
        self.push(
            "concat_cols",
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        if start >= end || end > cols {
            return Err(invalid("slice_cols", format!("range {start}..{end} of {cols}")));
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * w);
        for i in 0..rows {
            data.extend_from_slice(&src[i * cols + start..i * cols + end]);
        }
        self.push(
            "slice_cols",
            Tensor::new(vec![rows, w], data)?,
            Op::SliceCols(a, start),
            &[a],
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        if idx.is_empty() {
            return Err(invalid("gather_rows", "empty index list"));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(invalid("gather_rows", format!("row {i} of {rows}")));
            }
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        self.push(
            "gather_rows",
            Tensor::new(vec![idx.len(), cols], data)?,
            Op::GatherRows(a, idx.to_vec()),
            &[a],
        )
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        if idx.is_empty() {
            return Err(invalid("gather_cols", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= cols) {
            return Err(invalid("gather_cols", format!("column {bad} of {cols}")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * idx.len());
        for i in 0..rows {
            for &j in idx {
                data.push(src[i * cols + j]);
            }
        }
        self.push(
            "gather_cols",
            Tensor::new(vec![rows, idx.len()], data)?,
            Op::GatherCols(a, idx.to_vec()),
            &[a],
        )
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            softmax_row(&src[i * cols..(i + 1) * cols], None, &mut out[i * cols..(i + 1) * cols]);
        }
        let shape = self.shape(a).to_vec();
        self.push("softmax", Tensor::new(shape, out)?, Op::Softmax(a), &[a])
    }

    /// Softmax over the entries where `allowed` is true; the rest are exactly
    /// zero. Every row needs at least one allowed entry.
    pub fn masked_softmax_lastdim(&mut self, a: Var, allowed: &[bool]) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        if allowed.len() != rows * cols {
            return Err(invalid("masked_softmax", "mask size differs from input"));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let m = &allowed[i * cols..(i + 1) * cols];
            if !m.iter().any(|&b| b) {
                return Err(invalid("masked_softmax", format!("row {i} fully masked")));
            }
            softmax_row(
                &src[i * cols..(i + 1) * cols],
                Some(m),
                &mut out[i * cols..(i + 1) * cols],
            );
        }
        let shape = self.shape(a).to_vec();
        self.push("masked_softmax", Tensor::new(shape, out)?, Op::MaskedSoftmax(a), &[a])
    }

    /// Layer normalization over the last dimension with learnable gain and
    /// bias (each of length `cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gain)));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let r = &src[i * cols..(i + 1) * cols];
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..cols {
                let h = (r[j] - mean) * is;
                xhat[i * cols + j] = h;
                out[i * cols + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            "layer_norm",
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push("relu", Tensor::new(shape, data)?, Op::Relu(a), &[a])
    }

    /// `x · w + b` with `w: in × out` and `b` of length `out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, din) = self.dims(x);
        let (wi, dout) = self.dims(w);
        if din != wi {
            return Err(mismatch("linear", self.shape(x), self.shape(w)));
        }
        if self.value(b).len() != dout {
            return Err(mismatch("linear", self.shape(w), self.shape(b)));
        }
        let mut out = gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            din,
            1,
            self.value(w).data(),
            dout,
            1,
        );
        let bias = self.value(b).data();
        for row in out.chunks_mut(dout) {
            for (o, bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        self.push(
            "linear",
            Tensor::new(vec![n, dout], out)?,
            Op::Linear { x, w, b },
            &[x, w, b],
        )
    }

    /// Inverted dropout. With `train == false` or `p == 0` this returns `a`
    /// itself.
    pub fn dropout(&mut self, a: Var, p: f64, key: DropoutKey, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid("dropout", format!("p = {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let factors: Vec<f64> = (0..self.value(a).len() as u64).map(|i| key.factor(p, i)).collect();
        let data = self.value(a).data().iter().zip(&factors).map(|(x, f)| x * f).collect();
        let shape = self.shape(a).to_vec();
        self.push("dropout", Tensor::new(shape, data)?, Op::Dropout(a, factors), &[a])
    }

    /// Row-wise `x / ‖x‖`; all-zero rows map to zero rows.
    pub fn l2_normalize_lastdim(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        let src = self.value(a).data();
        let mut norms = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let r = &src[i * cols..(i + 1) * cols];
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[i] = n;
            if n > 0.0 {
                for j in 0..cols {
                    out[i * cols + j] = r[j] / n;
                }
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(
            "l2_normalize",
            Tensor::new(shape, out)?,
            Op::L2Normalize(a, norms),
            &[a],
        )
    }

    /// For each row `q` of `scores`: softmax of `scores[q, j] · inv_temp` over
    /// `j ∈ support[q]`, then the weighted sum of `values[j]`. Entries outside
    /// the support receive exactly zero gradient.
    pub fn sparse_attention(
        &mut self,
        scores: Var,
        values: Var,
        support: Vec<Vec<usize>>,
        inv_temp: f64,
    ) -> Result<Var> {
        let (nq, nv) = self.dims(scores);
        let (nvv, d) = self.dims(values);
        if nv != nvv || support.len() != nq {
            return Err(mismatch("sparse_attention", self.shape(scores), self.shape(values)));
        }
        let s = self.value(scores).data();
        let v = self.value(values).data();
        let mut out = vec![0.0; nq * d];
        let mut weights = Vec::with_capacity(nq);
        for (q, sup) in support.iter().enumerate() {
            if sup.is_empty() {
                return Err(invalid("sparse_attention", format!("empty support for row {q}")));
            }
            if let Some(&bad) = sup.iter().find(|&&j| j >= nv) {
                return Err(invalid("sparse_attention", format!("index {bad} of {nv}")));
            }
            let row = &s[q * nv..(q + 1) * nv];
            let w = support_softmax(row, sup, inv_temp);
            let acc = &mut out[q * d..(q + 1) * d];
            for (&j, &wj) in sup.iter().zip(&w) {
                for (a, &x) in acc.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                    *a += wj * x;
                }
            }
            weights.push(w);
        }
        self.push(
            "sparse_attention",
            Tensor::new(vec![nq, d], out)?,
            Op::SparseAttention {
                scores,
                values,
                support,
                weights,
                inv_temp,
            },
            &[scores, values],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Weighted mean cross-entropy: `Σ wᵢ·(−log softmax(zᵢ)[tᵢ]) / Σ wᵢ`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (n, k) = self.dims(logits);
        if targets.len() != n || weights.len() != n {
            return Err(invalid("cross_entropy", "targets/weights length differs from rows"));
        }
        let wsum: f64 = weights.iter().sum();
        if wsum <= 0.0 {
            return Err(invalid("cross_entropy", "weights sum to zero"));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            if targets[i] >= k {
                return Err(invalid("cross_entropy", format!("target {} of {k}", targets[i])));
            }
            let row = &z[i * k..(i + 1) * k];
            softmax_row(row, None, &mut probs[i * k..(i + 1) * k]);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += weights[i] * (lse - row[targets[i]]);
        }
        self.push(
            "cross_entropy",
            Tensor::scalar(loss / wsum),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean binary cross-entropy with logits over all elements.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let x = self.value(logits).data();
        if x.len() != targets.len() {
            return Err(invalid("bce_with_logits", "target length differs from input"));
        }
        let loss = x
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / x.len() as f64;
        self.push(
            "bce_with_logits",
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    /// Row-wise Dice loss with unit smoothing, averaged over rows.
    pub fn dice(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let (n, m) = self.dims(logits);
        if n * m != targets.len() {
            return Err(invalid("dice", "target length differs from input"));
        }
        let x = self.value(logits).data();
        let mut loss = 0.0;
        for i in 0..n {
            let (num, den) = dice_terms(&x[i * m..(i + 1) * m], &targets[i * m..(i + 1) * m]);
            loss += 1.0 - num / den;
        }
        self.push(
            "dice",
            Tensor::scalar(loss / n as f64),
            Op::Dice {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    // ----------------------------------------------------------- backward

    /// Clears gradients so that [`backward`](Self::backward) may run again.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Reverse pass from a one-element `loss`. Gradients from multiple uses
    /// of a node add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.recording {
            return Err(TensorError::NotRecording);
        }
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let n = self.value(v).len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out_cols = node.value.cols();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.rg(*a) {
                    // g (m×n) · bᵀ (n×k)
                    let da = gemm(m, n, k, g, n, 1, self.value(*b).data(), 1, n);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    // aᵀ (k×m) · g (m×n)
                    let db = gemm(k, m, n, self.value(*a).data(), 1, k, g, n, 1);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims(*a);
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] = g[c * m + r];
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.iter().map(|x| x * c).collect());
            }
            Op::ScaleBy(a, s) => {
                let c = self.value(*s).item();
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.iter().map(|x| x * c).collect());
                }
                if self.rg(*s) {
                    let ds = g.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).sum();
                    self.accumulate(grads, *s, vec![ds]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.accumulate(grads, *p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let mut off = 0;
                for p in parts {
                    let c = self.dims(*p).1;
                    if self.rg(*p) {
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * out_cols + off..r * out_cols + off + c]);
                        }
                        self.accumulate(grads, *p, dp);
                    }
                    off += c;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.dims(*a);
                let w = out_cols;
                let start = *start;
                self.accumulate_with(grads, *a, |da| {
                    for r in 0..rows {
                        for c in 0..w {
                            da[r * cols + start + c] += g[r * w + c];
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let cols = self.dims(*a).1;
                self.accumulate_with(grads, *a, |da| {
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..cols {
                            da[src * cols + c] += g[r * cols + c];
                        }
                    }
                });
            }
            Op::GatherCols(a, idx) => {
                let (rows, cols) = self.dims(*a);
                let w = idx.len();
                self.accumulate_with(grads, *a, |da| {
                    for r in 0..rows {
                        for (c, &src) in idx.iter().enumerate() {
                            da[r * cols + src] += g[r * w + c];
                        }
                    }
                });
            }
            Op::Softmax(a) | Op::MaskedSoftmax(a) => {
                let y = node.value.data();
                let cols = out_cols;
                let mut da = vec![0.0; y.len()];
                for r in 0..node.value.rows() {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for c in 0..cols {
                        da[r * cols + c] = ys[c] * (gs[c] - dot);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = out_cols;
                let rows = node.value.rows();
                let gv = self.value(*gain).data();
                if self.rg(*x) {
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let d = g[r * cols + c] * gv[c];
                            mean_d += d;
                            mean_dx += d * xhat[r * cols + c];
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        for c in 0..cols {
                            let d = g[r * cols + c] * gv[c];
                            dx[r * cols + c] = inv_std[r] * (d - mean_d - xhat[r * cols + c] * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*gain) {
                    let mut dg = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.rg(*bias) {
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += g[r * cols + c];
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let da = g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(grads, *a, da);
            }
            Op::Linear { x, w, b } => {
                let (n, din) = self.dims(*x);
                let dout = out_cols;
                if self.rg(*x) {
                    let dx = gemm(n, dout, din, g, dout, 1, self.value(*w).data(), 1, dout);
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*w) {
                    let dw = gemm(din, n, dout, self.value(*x).data(), 1, din, g, dout, 1);
                    self.accumulate(grads, *w, dw);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; dout];
                    for row in g.chunks(dout) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Dropout(a, factors) => {
                self.accumulate(grads, *a, g.iter().zip(factors).map(|(g, f)| g * f).collect());
            }
            Op::L2Normalize(a, norms) => {
                let y = node.value.data();
                let cols = out_cols;
                let mut da = vec![0.0; y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for c in 0..cols {
                        da[r * cols + c] = (gs[c] - ys[c] * dot) / n;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::SparseAttention {
                scores,
                values,
                support,
                weights,
                inv_temp,
            } => {
                let nv = self.dims(*scores).1;
                let d = out_cols;
                let v = self.value(*values).data();
                if self.rg(*scores) {
                    self.accumulate_with(grads, *scores, |ds| {
                        for (q, (sup, w)) in support.iter().zip(weights).enumerate() {
                            let gq = &g[q * d..(q + 1) * d];
                            let dalpha: Vec<f64> = sup
                                .iter()
                                .map(|&j| gq.iter().zip(&v[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum())
                                .collect();
                            let mean: f64 = w.iter().zip(&dalpha).map(|(a, b)| a * b).sum();
                            for ((&j, &wj), &da) in sup.iter().zip(w).zip(&dalpha) {
                                ds[q * nv + j] += wj * (da - mean) * inv_temp;
                            }
                        }
                    });
                }
                if self.rg(*values) {
                    self.accumulate_with(grads, *values, |dv| {
                        for (q, (sup, w)) in support.iter().zip(weights).enumerate() {
                            let gq = &g[q * d..(q + 1) * d];
                            for (&j, &wj) in sup.iter().zip(w) {
                                for (o, &gg) in dv[j * d..(j + 1) * d].iter_mut().zip(gq) {
                                    *o += wj * gg;
                                }
                            }
                        }
                    });
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let k = self.dims(*logits).1;
                let wsum: f64 = weights.iter().sum();
                let mut dz = probs.clone();
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    dz[i * k + t] -= 1.0;
                    for c in 0..k {
                        dz[i * k + c] *= w / wsum * g[0];
                    }
                }
                self.accumulate(grads, *logits, dz);
            }
            Op::BceWithLogits { logits, targets } => {
                let x = self.value(*logits).data();
                let n = x.len() as f64;
                let dx = x
                    .iter()
                    .zip(targets)
                    .map(|(&x, &t)| (sigmoid(x) - t) / n * g[0])
                    .collect();
                self.accumulate(grads, *logits, dx);
            }
            Op::Dice { logits, targets } => {
                let (n, m) = self.dims(*logits);
                let x = self.value(*logits).data();
                let mut dx = vec![0.0; n * m];
                for r in 0..n {
                    let xs = &x[r * m..(r + 1) * m];
                    let ts = &targets[r * m..(r + 1) * m];
                    let (num, den) = dice_terms(xs, ts);
                    for c in 0..m {
                        let p = sigmoid(xs[c]);
                        let dldp = -(2.0 * ts[c] * den - num) / (den * den);
                        dx[r * m + c] = dldp * p * (1.0 - p) / n as f64 * g[0];
                    }
                }
                self.accumulate(grads, *logits, dx);
            }
        }
    }
}

/// Numerator and denominator of the smoothed Dice ratio for one row.
fn dice_terms(logits: &[f64], targets: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut tsum = 0.0;
    for (&x, &t) in logits.iter().zip(targets) {
        let p = sigmoid(x);
        inter += p * t;
        psum += p;
        tsum += t;
    }
    (2.0 * inter + 1.0, psum + tsum + 1.0)
}

fn softmax_row(row: &[f64], allowed: Option<&[bool]>, out: &mut [f64]) {
    let ok = |j: usize| allowed.is_none_or(|m| m[j]);
    let mut m = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if ok(j) && v > m {
            m = v;
        }
    }
    let mut s = 0.0;
    for (j, &v) in row.iter().enumerate() {
        out[j] = if ok(j) { (v - m).exp() } else { 0.0 };
        s += out[j];
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// Softmax of `row[j] · inv_temp` over `j ∈ support`, in support order.
pub(crate) fn support_softmax(row: &[f64], support: &[usize], inv_temp: f64) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &j in support {
        m = m.max(row[j] * inv_temp);
    }
    let mut w: Vec<f64> = support.iter().map(|&j| (row[j] * inv_temp - m).exp()).collect();
    let s: f64 = w.iter().sum();
    for x in &mut w {
        *x /= s;
    }
    w
}

//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! The primitive set is the smallest one that supports a single-block
//! attention decoder: matmul, transpose, elementwise add/mul, bias add,
//! tanh, row softmax / log-softmax, row gather (which doubles as the
//! embedding lookup), cross entropy, softplus, and scalar affine ops.
//! Everything runs single-threaded per tape; distinct tapes share nothing.

use crate::error::{LabError, Result};

/// Plain tensor snapshot: row-major f64 data plus an optional gradient
/// of identical length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(LabError::ShapeMismatch {
                op: "tensor_new",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(TensorId, TensorId),
    Transpose(TensorId),
    Add(TensorId, TensorId),
    Mul(TensorId, TensorId),
    AddBias(TensorId, TensorId),
    Tanh(TensorId),
    RowSoftmax(TensorId),
    RowLogSoftmax(TensorId),
    GatherRows(TensorId, Vec<usize>),
    CrossEntropy(TensorId, Vec<usize>),
    Softplus(TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId, f64),
    SumAll(TensorId),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

/// Ordered record of primitive operations. Backward traversal walks the
/// record in reverse; node order is a topological order by construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_ran: bool,
    empty_cross_entropy: bool,
}

fn all_finite(data: &[f64]) -> bool {
    data.iter().all(|v| v.is_finite())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Gradient of the last backward pass; zeros before any backward.
    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    /// Set when a cross-entropy op was asked to average over zero rows.
    pub fn saw_empty_cross_entropy(&self) -> bool {
        self.empty_cross_entropy
    }

    pub fn snapshot(&self, id: TensorId) -> Tensor {
        let node = &self.nodes[id.0];
        Tensor {
            shape: node.shape.clone(),
            data: node.data.clone(),
            grad: if self.backward_ran {
                Some(node.grad.clone())
            } else {
                None
            },
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<TensorId> {
        if !all_finite(&data) {
            return Err(LabError::NonFinite { op: op_name(&op) });
        }
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node {
            shape,
            data,
            grad,
            op,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>) -> Result<TensorId> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(LabError::ShapeMismatch {
                op: "leaf",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        self.push(shape.to_vec(), data, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, v: f64) -> Result<TensorId> {
        self.leaf(&[1], vec![v])
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(LabError::ShapeMismatch {
                op,
                left: s.to_vec(),
                right: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    /// Standard matrix product of an `m x k` and a `k x n` operand.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(LabError::ShapeMismatch {
                op: "matmul",
                left: vec![m, ka],
                right: vec![kb, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(
            self.value(a),
            self.value(b),
            &mut out,
            m,
            ka,
            n,
        );
        self.push(vec![m, n], out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "transpose")?;
        let src = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(vec![n, m], out, Op::Transpose(a))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(LabError::ShapeMismatch {
                op: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Add(a, b))
    }

    /// Elementwise (Hadamard) product of two same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(LabError::ShapeMismatch {
                op: "mul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Mul(a, b))
    }

    /// Broadcast add of a length-`n` bias row onto an `m x n` tensor.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "add_bias")?;
        if self.shape(bias) != [n] {
            return Err(LabError::ShapeMismatch {
                op: "add_bias",
                left: vec![m, n],
                right: self.shape(bias).to_vec(),
            });
        }
        let av = self.value(a);
        let bv = self.value(bias);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = av[i * n + j] + bv[j];
            }
        }
        self.push(vec![m, n], out, Op::AddBias(a, bias))
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.value(a).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Tanh(a))
    }

    /// Row-wise softmax with max-subtraction; every output row sums to 1.
    pub fn row_softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "row_softmax")?;
        let mut out = vec![0.0; m * n];
        softmax_rows(self.value(a), &mut out, m, n);
        self.push(vec![m, n], out, Op::RowSoftmax(a))
    }

    /// Row-wise log-softmax (shift by the row log-sum-exp).
    pub fn row_log_softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "row_log_softmax")?;
        let av = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let lse = log_sum_exp(row);
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        self.push(vec![m, n], out, Op::RowLogSoftmax(a))
    }

    /// Row gather: `out[i] = a[indices[i]]`. Serves both embedding lookup
    /// (gather from the embedding table by token id) and selecting the
    /// positions that carry loss.
    pub fn gather_rows(&mut self, a: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "gather_rows")?;
        for &idx in indices {
            if idx >= m {
                return Err(LabError::TargetOutOfRange { index: idx, vocab: m });
            }
        }
        let av = self.value(a);
        let mut out = vec![0.0; indices.len() * n];
        for (i, &idx) in indices.iter().enumerate() {
            out[i * n..(i + 1) * n].copy_from_slice(&av[idx * n..(idx + 1) * n]);
        }
        self.push(
            vec![indices.len(), n],
            out,
            Op::GatherRows(a, indices.to_vec()),
        )
    }

    /// Mean over rows of `-log softmax(logits)[row][target]`. Zero rows
    /// yield 0 and raise the tape's empty-cross-entropy flag. The second
    /// return marks that empty case.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
    ) -> Result<(TensorId, bool)> {
        let (m, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(LabError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![m, v],
                right: vec![targets.len()],
            });
        }
        for &t in targets {
            if t >= v {
                return Err(LabError::TargetOutOfRange { index: t, vocab: v });
            }
        }
        if m == 0 {
            self.empty_cross_entropy = true;
            let id = self.push(vec![1], vec![0.0], Op::CrossEntropy(logits, Vec::new()))?;
            return Ok((id, true));
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &lv[i * v..(i + 1) * v];
            total += log_sum_exp(row) - row[t];
        }
        let mean = total / m as f64;
        let id = self.push(vec![1], vec![mean], Op::CrossEntropy(logits, targets.to_vec()))?;
        Ok((id, false))
    }

    /// Elementwise `ln(1 + e^x)`, computed in the overflow-free form.
    pub fn softplus(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p())
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Softplus(a))
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.value(a).iter().map(|v| v * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a, c))
    }

    /// Add a constant to every element.
    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.value(a).iter().map(|v| v + c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::AddScalar(a, c))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::SumAll(a))
    }

    /// Reverse pass from a scalar loss node. Populates `grad` on every
    /// node reachable from the loss, leaves included.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(LabError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss.0].grad[0] = 1.0;
        self.backward_ran = true;

        for idx in (0..=loss.0).rev() {
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    let (go, av, bv) = {
                        let node = &self.nodes[idx];
                        (node.grad.clone(), a, b)
                    };
                    // da += go . b^T ; db += a^T . go
                    let bvals = self.nodes[bv.0].data.clone();
                    matmul_nt_acc(&go, &bvals, &mut self.nodes[av.0].grad, m, n, k);
                    let avals = self.nodes[av.0].data.clone();
                    matmul_tn_acc(&avals, &go, &mut self.nodes[bv.0].grad, m, k, n);
                }
                Op::Transpose(a) => {
                    let (n, m) = (self.nodes[idx].shape[0], self.nodes[idx].shape[1]);
                    let go = self.nodes[idx].grad.clone();
                    let ga = &mut self.nodes[a.0].grad;
                    for i in 0..n {
                        for j in 0..m {
                            ga[j * n + i] += go[i * m + j];
                        }
                    }
                }
                Op::Add(a, b) => {
                    let go = self.nodes[idx].grad.clone();
                    for (g, &d) in self.nodes[a.0].grad.iter_mut().zip(&go) {
                        *g += d;
                    }
                    for (g, &d) in self.nodes[b.0].grad.iter_mut().zip(&go) {
                        *g += d;
                    }
                }
                Op::Mul(a, b) => {
                    let go = self.nodes[idx].grad.clone();
                    let bvals = self.nodes[b.0].data.clone();
                    for ((g, &d), &bd) in self.nodes[a.0].grad.iter_mut().zip(&go).zip(&bvals) {
                        *g += d * bd;
                    }
                    let avals = self.nodes[a.0].data.clone();
                    for ((g, &d), &ad) in self.nodes[b.0].grad.iter_mut().zip(&go).zip(&avals) {
                        *g += d * ad;
                    }
                }
                Op::AddBias(a, bias) => {
                    let (m, n) = (self.nodes[idx].shape[0], self.nodes[idx].shape[1]);
                    let go = self.nodes[idx].grad.clone();
                    for (g, &d) in self.nodes[a.0].grad.iter_mut().zip(&go) {
                        *g += d;
                    }
                    let gb = &mut self.nodes[bias.0].grad;
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += go[i * n + j];
                        }
                    }
                }
                Op::Tanh(a) => {
                    let go = self.nodes[idx].grad.clone();
                    let out = self.nodes[idx].data.clone();
                    for ((g, &d), &o) in self.nodes[a.0].grad.iter_mut().zip(&go).zip(&out) {
                        *g += d * (1.0 - o * o);
                    }
                }
                Op::RowSoftmax(a) => {
                    let (m, n) = (self.nodes[idx].shape[0], self.nodes[idx].shape[1]);
                    let go = self.nodes[idx].grad.clone();
                    let out = self.nodes[idx].data.clone();
                    let ga = &mut self.nodes[a.0].grad;
                    for i in 0..m {
                        let row = i * n;
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += go[row + j] * out[row + j];
                        }
                        for j in 0..n {
                            ga[row + j] += out[row + j] * (go[row + j] - dot);
                        }
                    }
                }
                Op::RowLogSoftmax(a) => {
                    let (m, n) = (self.nodes[idx].shape[0], self.nodes[idx].shape[1]);
                    let go = self.nodes[idx].grad.clone();
                    let out = self.nodes[idx].data.clone();
                    let ga = &mut self.nodes[a.0].grad;
                    for i in 0..m {
                        let row = i * n;
                        let mut gsum = 0.0;
                        for j in 0..n {
                            gsum += go[row + j];
                        }
                        for j in 0..n {
                            ga[row + j] += go[row + j] - out[row + j].exp() * gsum;
                        }
                    }
                }
                Op::GatherRows(a, indices) => {
                    let n = self.nodes[idx].shape[1];
                    let go = self.nodes[idx].grad.clone();
                    let ga = &mut self.nodes[a.0].grad;
                    for (i, &idx_row) in indices.iter().enumerate() {
                        for j in 0..n {
                            ga[idx_row * n + j] += go[i * n + j];
                        }
                    }
                }
                Op::CrossEntropy(logits, targets) => {
                    if targets.is_empty() {
                        continue;
                    }
                    let m = targets.len();
                    let v = self.nodes[logits.0].shape[1];
                    let go = self.nodes[idx].grad[0];
                    let lv = self.nodes[logits.0].data.clone();
                    let gl = &mut self.nodes[logits.0].grad;
                    let inv_m = go / m as f64;
                    let mut probs = vec![0.0; v];
                    for (i, &t) in targets.iter().enumerate() {
                        let row = &lv[i * v..(i + 1) * v];
                        softmax_row(row, &mut probs);
                        for j in 0..v {
                            gl[i * v + j] += inv_m * (probs[j] - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                }
                Op::Softplus(a) => {
                    let go = self.nodes[idx].grad.clone();
                    let avals = self.nodes[a.0].data.clone();
                    for ((g, &d), &x) in self.nodes[a.0].grad.iter_mut().zip(&go).zip(&avals) {
                        *g += d / (1.0 + (-x).exp());
                    }
                }
                Op::Scale(a, c) => {
                    let go = self.nodes[idx].grad.clone();
                    for (g, &d) in self.nodes[a.0].grad.iter_mut().zip(&go) {
                        *g += d * c;
                    }
                }
                Op::AddScalar(a, _) => {
                    let go = self.nodes[idx].grad.clone();
                    for (g, &d) in self.nodes[a.0].grad.iter_mut().zip(&go) {
                        *g += d;
                    }
                }
                Op::SumAll(a) => {
                    let go = self.nodes[idx].grad[0];
                    for g in self.nodes[a.0].grad.iter_mut() {
                        *g += go;
                    }
                }
            }
        }
        Ok(())
    }

    /// Recompute every non-leaf node's value from the recorded ops.
    /// With unchanged leaves the result is bit-identical to the original
    /// forward pass; used to validate the tape's replay contract.
    pub fn replay_forward(&mut self) -> Result<()> {
        for idx in 0..self.nodes.len() {
            let op = self.nodes[idx].op.clone();
            let recomputed: Option<Vec<f64>> = match &op {
                Op::Leaf => None,
                Op::MatMul(a, b) => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    let mut out = vec![0.0; m * n];
                    matmul_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, m, k, n);
                    Some(out)
                }
                Op::Transpose(a) => {
                    let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let src = &self.nodes[a.0].data;
                    let mut out = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            out[j * m + i] = src[i * n + j];
                        }
                    }
                    Some(out)
                }
                Op::Add(a, b) => Some(
                    self.nodes[a.0]
                        .data
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(x, y)| x + y)
                        .collect(),
                ),
                Op::Mul(a, b) => Some(
                    self.nodes[a.0]
                        .data
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(x, y)| x * y)
                        .collect(),
                ),
                Op::AddBias(a, bias) => {
                    let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let av = &self.nodes[a.0].data;
                    let bv = &self.nodes[bias.0].data;
                    let mut out = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            out[i * n + j] = av[i * n + j] + bv[j];
                        }
                    }
                    Some(out)
                }
                Op::Tanh(a) => Some(self.nodes[a.0].data.iter().map(|v| v.tanh()).collect()),
                Op::RowSoftmax(a) => {
                    let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let mut out = vec![0.0; m * n];
                    softmax_rows(&self.nodes[a.0].data, &mut out, m, n);
                    Some(out)
                }
                Op::RowLogSoftmax(a) => {
                    let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let av = &self.nodes[a.0].data;
                    let mut out = vec![0.0; m * n];
                    for i in 0..m {
                        let row = &av[i * n..(i + 1) * n];
                        let lse = log_sum_exp(row);
                        for j in 0..n {
                            out[i * n + j] = row[j] - lse;
                        }
                    }
                    Some(out)
                }
                Op::GatherRows(a, indices) => {
                    let n = self.nodes[a.0].shape[1];
                    let av = &self.nodes[a.0].data;
                    let mut out = vec![0.0; indices.len() * n];
                    for (i, &idx_row) in indices.iter().enumerate() {
                        out[i * n..(i + 1) * n]
                            .copy_from_slice(&av[idx_row * n..(idx_row + 1) * n]);
                    }
                    Some(out)
                }
                Op::CrossEntropy(logits, targets) => {
                    if targets.is_empty() {
                        Some(vec![0.0])
                    } else {
                        let v = self.nodes[logits.0].shape[1];
                        let lv = &self.nodes[logits.0].data;
                        let mut total = 0.0;
                        for (i, &t) in targets.iter().enumerate() {
                            let row = &lv[i * v..(i + 1) * v];
                            total += log_sum_exp(row) - row[t];
                        }
                        Some(vec![total / targets.len() as f64])
                    }
                }
                Op::Softplus(a) => Some(
                    self.nodes[a.0]
                        .data
                        .iter()
                        .map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p())
                        .collect(),
                ),
                Op::Scale(a, c) => {
                    Some(self.nodes[a.0].data.iter().map(|v| v * c).collect())
                }
                Op::AddScalar(a, c) => {
                    Some(self.nodes[a.0].data.iter().map(|v| v + c).collect())
                }
                Op::SumAll(a) => Some(vec![self.nodes[a.0].data.iter().sum()]),
            };
            if let Some(data) = recomputed {
                if !all_finite(&data) {
                    return Err(LabError::NonFinite { op: op_name(&op) });
                }
                self.nodes[idx].data = data;
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::AddBias(..) => "add_bias",
        Op::Tanh(..) => "tanh",
        Op::RowSoftmax(..) => "row_softmax",
        Op::RowLogSoftmax(..) => "row_log_softmax",
        Op::GatherRows(..) => "gather_rows",
        Op::CrossEntropy(..) => "cross_entropy",
        Op::Softplus(..) => "softplus",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::SumAll(..) => "sum_all",
    }
}

/// out[m x n] = a[m x k] . b[k x n]
fn matmul_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
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
}

/// acc[m x k] += go[m x n] . b^T where b is [k x n]
fn matmul_nt_acc(go: &[f64], b: &[f64], acc: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &go[i * n..(i + 1) * n];
        let arow = &mut acc[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            arow[p] += s;
        }
    }
}

/// acc[k x n] += a^T . go where a is [m x k], go is [m x n]
fn matmul_tn_acc(a: &[f64], go: &[f64], acc: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &go[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let accrow = &mut acc[p * n..(p + 1) * n];
            for (o, &gv) in accrow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn softmax_rows(a: &[f64], out: &mut [f64], m: usize, n: usize) {
    for i in 0..m {
        let (src, dst) = (&a[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        softmax_row(src, dst);
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Neumaier-compensated dot product. Projection and cosine quantities
/// are computed through this so heavy cancellation over long vectors
/// stays near machine precision.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut sum = 0.0;
    let mut comp = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let term = x * y;
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf2(tape: &mut Tape, m: usize, n: usize, data: &[f64]) -> TensorId {
        tape.leaf(&[m, n], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = leaf2(&mut tape, 2, 2, &[2.0, 3.0, 4.0, 5.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2]] x [[3],[4]] = [[11]]
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, 1, 2, &[1.0, 2.0]);
        let b = leaf2(&mut tape, 2, 1, &[3.0, 4.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, 2, 3, &[0.0; 6]);
        let b = leaf2(&mut tape, 4, 2, &[0.0; 8]);
        match tape.matmul(a, b) {
            Err(LabError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![4, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, 1, 2, &[0.0, 0.0]);
        let s = tape.row_softmax(a).unwrap();
        assert_eq!(tape.value(s), &[0.5, 0.5]);

        // softmax(ln 1, ln 3) = (1/4, 3/4)
        let b = leaf2(&mut tape, 1, 2, &[0.0, 3.0f64.ln()]);
        let s2 = tape.row_softmax(b).unwrap();
        let v = tape.value(s2);
        assert!((v[0] - 0.25).abs() < 1e-15);
        assert!((v[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, 1, 2, &[1000.0, 1000.0]);
        let s = tape.row_softmax(a).unwrap();
        assert_eq!(tape.value(s), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, 3, 4, &[0.3, -2.0, 5.0, 1.1, 9.0, 9.0, 9.0, 9.0, -3.0, 0.0, 3.0, 6.0]);
        let s = tape.row_softmax(a).unwrap();
        let v = tape.value(s);
        for i in 0..3 {
            let sum: f64 = v[i * 4..(i + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, 2, 10, &[0.0; 20]);
        let (ce, empty) = tape.cross_entropy(a, &[3, 7]).unwrap();
        assert!(!empty);
        assert!((tape.value(ce)[0] - 10.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_is_near_zero() {
        let mut tape = Tape::new();
        let mut logits = vec![0.0; 10];
        logits[4] = 50.0;
        let a = leaf2(&mut tape, 1, 10, &logits);
        let (ce, _) = tape.cross_entropy(a, &[4]).unwrap();
        assert!(tape.value(ce)[0] >= 0.0);
        assert!(tape.value(ce)[0] < 1e-12);
    }

    #[test]
    fn cross_entropy_empty_rows_flags() {
        let mut tape = Tape::new();
        let a = tape.leaf(&[0, 10], vec![]).unwrap();
        let (ce, empty) = tape.cross_entropy(a, &[]).unwrap();
        assert!(empty);
        assert!(tape.saw_empty_cross_entropy());
        assert_eq!(tape.value(ce), &[0.0]);
    }

    #[test]
    fn cross_entropy_bad_target_errors() {
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, 1, 4, &[0.0; 4]);
        assert!(matches!(
            tape.cross_entropy(a, &[4]),
            Err(LabError::TargetOutOfRange { index: 4, vocab: 4 })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = leaf2(&mut tape, 2, 3, &[1.0, -2.0, 0.5, 4.0, 9.0, -1.0]);
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), &[1.0; 6]);
    }

    #[test]
    fn backward_of_square_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[1], vec![3.0]).unwrap();
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = leaf2(&mut tape, 2, 2, &[1.0; 4]);
        assert!(matches!(
            tape.backward(x),
            Err(LabError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn softplus_closed_form() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[1], vec![-1.0]).unwrap();
        let y = tape.softplus(x).unwrap();
        assert!((tape.value(y)[0] - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        // saturation on the negative side
        let z = tape.leaf(&[1], vec![-800.0]).unwrap();
        let s = tape.softplus(z).unwrap();
        assert_eq!(tape.value(s)[0], 0.0);
    }

    /// Central finite differences on a random composite graph built from
    /// the primitive set; the independent oracle for backward.
    #[test]
    fn backward_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let m = 3;
        let k = 4;
        let n = 5;
        let a0: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b0: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias0: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let targets = [1usize, 4, 0];

        let eval = |a: &[f64], b: &[f64], bias: &[f64]| -> (Tape, TensorId, TensorId, TensorId, TensorId) {
            let mut tape = Tape::new();
            let ai = tape.leaf(&[m, k], a.to_vec()).unwrap();
            let bi = tape.leaf(&[k, n], b.to_vec()).unwrap();
            let bb = tape.leaf(&[n], bias.to_vec()).unwrap();
            let mm = tape.matmul(ai, bi).unwrap();
            let biased = tape.add_bias(mm, bb).unwrap();
            let t = tape.tanh(biased).unwrap();
            let sq = tape.mul(t, t).unwrap();
            let sc = tape.scale(sq, 1.7).unwrap();
            let logits = tape.add(sc, biased).unwrap();
            let (ce, _) = tape.cross_entropy(logits, &targets).unwrap();
            let sp = tape.softplus(ce).unwrap();
            let loss = tape.sum_all(sp).unwrap();
            (tape, loss, ai, bi, bb)
        };

        let (mut tape, loss, ai, bi, bb) = eval(&a0, &b0, &bias0);
        tape.backward(loss).unwrap();
        let ga = tape.grad(ai).to_vec();
        let gb = tape.grad(bi).to_vec();
        let gbias = tape.grad(bb).to_vec();

        let h = 1e-5;
        let mut check = |which: usize, idx: usize, analytic: f64| {
            let mut ap = a0.clone();
            let mut bp = b0.clone();
            let mut biasp = bias0.clone();
            let slot = match which {
                0 => &mut ap[idx],
                1 => &mut bp[idx],
                _ => &mut biasp[idx],
            };
            let orig = *slot;
            *slot = orig + h;
            let (tp, lp, ..) = eval(&ap, &bp, &biasp);
            let up = tp.value(lp)[0];
            let slot = match which {
                0 => &mut ap[idx],
                1 => &mut bp[idx],
                _ => &mut biasp[idx],
            };
            *slot = orig - h;
            let (tm, lm, ..) = eval(&ap, &bp, &biasp);
            let down = tm.value(lm)[0];
            let fd = (up - down) / (2.0 * h);
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            assert!(
                (fd - analytic).abs() / denom < 1e-6,
                "which={which} idx={idx} fd={fd} analytic={analytic}"
            );
        };

        for idx in 0..m * k {
            check(0, idx, ga[idx]);
        }
        for idx in 0..k * n {
            check(1, idx, gb[idx]);
        }
        for idx in 0..n {
            check(2, idx, gbias[idx]);
        }
    }

    #[test]
    fn replay_reproduces_bit_identical_outputs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = tape.leaf(&[3, 4], data).unwrap();
        let t = tape.transpose(x).unwrap();
        let mm = tape.matmul(x, t).unwrap();
        let sm = tape.row_softmax(mm).unwrap();
        let out = tape.sum_all(sm).unwrap();
        let before: Vec<Vec<f64>> = (0..=out.0).map(|i| tape.value(TensorId(i)).to_vec()).collect();
        tape.replay_forward().unwrap();
        for (i, b) in before.iter().enumerate() {
            let after = tape.value(TensorId(i));
            assert_eq!(b.as_slice(), after, "node {i} changed under replay");
        }
    }

    #[test]
    fn same_graph_same_inputs_bit_identical() {
        let build = || {
            let mut tape = Tape::new();
            let x = tape.leaf(&[2, 2], vec![0.3, -1.2, 2.2, 0.7]).unwrap();
            let y = tape.tanh(x).unwrap();
            let z = tape.matmul(x, y).unwrap();
            let s = tape.row_softmax(z).unwrap();
            let l = tape.sum_all(s).unwrap();
            tape.backward(l).unwrap();
            (tape.value(l)[0], tape.grad(x).to_vec())
        };
        let (v1, g1) = build();
        let (v2, g2) = build();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(g1, g2);
    }

    #[test]
    fn compensated_dot_matches_naive_on_benign_input() {
        let a = [1.0, 2.0, 3.0];
        let b = [4.0, 5.0, 6.0];
        assert_eq!(dot(&a, &b), 32.0);
        assert_eq!(norm(&[3.0, 4.0]), 5.0);
    }
}

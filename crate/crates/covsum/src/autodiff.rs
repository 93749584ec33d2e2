//! Dense tensors and a reverse-mode differentiation tape.
//!
//! Everything runs in `f64`. Values are stored row-major; a scalar is a 1x1
//! tensor. The tape records operations in forward order, which is already a
//! topological order, so the backward pass is a single reverse sweep that
//! visits each node exactly once. Any op that produces a NaN or Inf fails
//! with [`TensorError::NonFinite`] instead of letting the poison spread.

use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("softmax: row {row} has every position masked")]
    FullyMaskedRow { row: usize },
    #[error("backward: loss must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

/// A dense row-major matrix of finite `f64` values.
///
/// The buffer is behind an `Arc`, so clones are cheap and a tensor that is
/// not being mutated can be shared freely across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(shape_err(
                "tensor",
                format!("{rows}x{cols} does not hold {} values", data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor" });
        }
        Ok(Tensor { rows, cols, data: Arc::new(data) })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: Arc::new(vec![0.0; rows * cols]) }
    }

    pub fn scalar(v: f64) -> Result<Self, TensorError> {
        Tensor::new(1, 1, vec![v])
    }

    /// A single-row tensor (1 x n).
    pub fn row(values: Vec<f64>) -> Result<Self, TensorError> {
        let n = values.len();
        Tensor::new(1, n, values)
    }

    /// A single-column tensor (n x 1).
    pub fn column(values: Vec<f64>) -> Result<Self, TensorError> {
        let n = values.len();
        Tensor::new(n, 1, values)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self, TensorError> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Tensor::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    /// Mutable access to the buffer; copies only if the buffer is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Copy of the rows `start..start + len` as a new tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor, TensorError> {
        if len == 0 || start + len > self.rows {
            return Err(shape_err(
                "slice_rows",
                format!("rows {start}..{} out of 0..{}", start + len, self.rows),
            ));
        }
        let data = self.data[start * self.cols..(start + len) * self.cols].to_vec();
        Tensor::new(len, self.cols, data)
    }

    pub(crate) fn shared(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }
}

/// Handle to a node on a [`Tape`].
pub type TensorId = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    Relu(TensorId),
    Softmax(TensorId),
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, eps: f64 },
    ConcatRows(Vec<TensorId>),
    ConcatCols(Vec<TensorId>),
    SliceRows { x: TensorId, start: usize },
    GatherRows { x: TensorId, index: Arc<Vec<usize>> },
    ScaleRows { x: TensorId, scale: TensorId },
    AddRow { x: TensorId, row: TensorId },
    Mean(TensorId),
    Sum(TensorId),
    Mse(TensorId, TensorId),
}

struct Node {
    rows: usize,
    cols: usize,
    data: Arc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Wengert tape: records ops during the forward pass, replays them in
/// reverse for gradients. One tape per forward/backward cycle.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn insert(&mut self, rows: usize, cols: usize, data: Arc<Vec<f64>>, op: Op, requires_grad: bool) -> TensorId {
        let id = self.nodes.len();
        self.nodes.push(Node { rows, cols, data, op, requires_grad, grad: None });
        id
    }

    /// Record a constant input. Its gradient is still computed (it may be
    /// needed for finite-difference checks) but it is not a parameter.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.insert(t.rows, t.cols, t.shared(), Op::Leaf, false)
    }

    /// Record a learnable parameter.
    pub fn param(&mut self, t: &Tensor) -> TensorId {
        self.insert(t.rows, t.cols, t.shared(), Op::Leaf, true)
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let n = &self.nodes[id];
        (n.rows, n.cols)
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn value(&self, id: TensorId) -> Tensor {
        let n = &self.nodes[id];
        Tensor { rows: n.rows, cols: n.cols, data: Arc::clone(&n.data) }
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Gradient accumulated by the last `backward`; `None` if no gradient
    /// flowed to this node.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn grad_or_zeros(&self, id: TensorId) -> Vec<f64> {
        match &self.nodes[id].grad {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[id].rows * self.nodes[id].cols],
        }
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op, name: &'static str) -> Result<TensorId, TensorError> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.insert(rows, cols, Arc::new(data), op, false))
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// C = A·B with backward dA += dC·Bᵀ, dB += Aᵀ·dC.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(shape_err("matmul", format!("{m}x{ka} . {kb}x{n}")));
        }
        let out = mat_mul(self.data(a), self.data(b), m, ka, n);
        self.push(m, n, out, Op::Matmul(a, b), "matmul")
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.shape(x);
        let out = mat_transpose(self.data(x), r, c);
        self.push(c, r, out, Op::Transpose(x), "transpose")
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x + y);
        self.push(r, c, out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x - y);
        self.push(r, c, out, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x * y);
        self.push(r, c, out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId, TensorError> {
        let (r, k) = self.shape(x);
        let out = self.data(x).iter().map(|v| v * c).collect();
        self.push(r, k, out, Op::Scale(x, c), "scale")
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> Result<TensorId, TensorError> {
        let (r, k) = self.shape(x);
        let out = self.data(x).iter().map(|v| v + c).collect();
        self.push(r, k, out, Op::AddScalar(x), "add_scalar")
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.shape(x);
        let out = self.data(x).iter().map(|v| v.max(0.0)).collect();
        self.push(r, c, out, Op::Relu(x), "relu")
    }

    /// Row-wise softmax with max-subtraction. Positions where `mask` is
    /// false get weight exactly 0.0 and are excluded before normalization.
    /// A row with no unmasked position is an error.
    pub fn softmax(&mut self, x: TensorId, mask: Option<&[bool]>) -> Result<TensorId, TensorError> {
        let (r, c) = self.shape(x);
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(shape_err(
                    "softmax",
                    format!("mask holds {} entries for a {r}x{c} input", m.len()),
                ));
            }
        }
        let data = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &data[i * c..(i + 1) * c];
            let keep = |j: usize| mask.is_none_or(|m| m[i * c + j]);
            let mut max = f64::NEG_INFINITY;
            for j in 0..c {
                if keep(j) && row[j] > max {
                    max = row[j];
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(TensorError::FullyMaskedRow { row: i });
            }
            let mut sum = 0.0;
            for j in 0..c {
                if keep(j) {
                    let e = (row[j] - max).exp();
                    out[i * c + j] = e;
                    sum += e;
                }
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        self.push(r, c, out, Op::Softmax(x), "softmax")
    }

    /// Per-row standardization followed by an affine gain/bias, both 1 x d.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f64) -> Result<TensorId, TensorError> {
        let (r, d) = self.shape(x);
        if d < 2 {
            return Err(shape_err("layer_norm", format!("needs width >= 2, got {d}")));
        }
        if eps <= 0.0 {
            return Err(shape_err("layer_norm", format!("eps must be positive, got {eps}")));
        }
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let (gr, gc) = self.shape(id);
            if (gr, gc) != (1, d) {
                return Err(shape_err("layer_norm", format!("{name} is {gr}x{gc}, expected 1x{d}")));
            }
        }
        let data = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &data[i * d..(i + 1) * d];
            let (mean, var) = row_mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[i * d + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        self.push(r, d, out, Op::LayerNorm { x, gain, bias, eps }, "layer_norm")
    }

    /// Stack tensors vertically; all parts must share the column count.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "no inputs".into()));
        }
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(shape_err("concat_rows", format!("widths {cols} vs {c}")));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        self.push(rows, cols, out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Stack tensors horizontally; all parts must share the row count.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no inputs".into()));
        }
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(shape_err("concat_cols", format!("heights {rows} vs {r}")));
            }
            cols += c;
        }
        let mut out = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let (_, c) = self.shape(p);
            let data = &self.nodes[p].data;
            for i in 0..rows {
                out[i * cols + offset..i * cols + offset + c].copy_from_slice(&data[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        self.push(rows, cols, out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId, TensorError> {
        let (r, c) = self.shape(x);
        if len == 0 || start + len > r {
            return Err(shape_err("slice_rows", format!("rows {start}..{} out of 0..{r}", start + len)));
        }
        let out = self.data(x)[start * c..(start + len) * c].to_vec();
        self.push(len, c, out, Op::SliceRows { x, start }, "slice_rows")
    }

    /// out[t] = x[index[t]]; rows may repeat. Backward scatter-adds.
    pub fn gather_rows(&mut self, x: TensorId, index: Vec<usize>) -> Result<TensorId, TensorError> {
        let (r, c) = self.shape(x);
        if index.is_empty() {
            return Err(shape_err("gather_rows", "empty index".into()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("row {bad} out of 0..{r}")));
        }
        let data = self.data(x);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in &index {
            out.extend_from_slice(&data[i * c..(i + 1) * c]);
        }
        let n = index.len();
        self.push(n, c, out, Op::GatherRows { x, index: Arc::new(index) }, "gather_rows")
    }

    /// out[i, :] = x[i, :] * scale[i]; `scale` is n x 1. Gradients flow to
    /// both the rows and the scales.
    pub fn scale_rows(&mut self, x: TensorId, scale: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.shape(x);
        let (sr, sc) = self.shape(scale);
        if (sr, sc) != (r, 1) {
            return Err(shape_err("scale_rows", format!("scale is {sr}x{sc}, expected {r}x1")));
        }
        let data = self.data(x);
        let s = self.data(scale);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = data[i * c + j] * s[i];
            }
        }
        self.push(r, c, out, Op::ScaleRows { x, scale }, "scale_rows")
    }

    /// Broadcast-add a 1 x d row to every row of x.
    pub fn add_row(&mut self, x: TensorId, row: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.shape(x);
        let (br, bc) = self.shape(row);
        if (br, bc) != (1, c) {
            return Err(shape_err("add_row", format!("row is {br}x{bc}, expected 1x{c}")));
        }
        let data = self.data(x);
        let b = self.data(row);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = data[i * c + j] + b[j];
            }
        }
        self.push(r, c, out, Op::AddRow { x, row }, "add_row")
    }

    pub fn mean(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let n = self.data(x).len();
        let m = self.data(x).iter().sum::<f64>() / n as f64;
        self.push(1, 1, vec![m], Op::Mean(x), "mean")
    }

    pub fn sum(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let s = self.data(x).iter().sum::<f64>();
        self.push(1, 1, vec![s], Op::Sum(x), "sum")
    }

    /// Mean of squared elementwise differences, as a scalar.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("mse", a, b)?;
        let n = self.data(a).len();
        let s = self
            .data(a)
            .iter()
            .zip(self.data(b).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n as f64;
        self.push(1, 1, vec![s], Op::Mse(a, b), "mse")
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<(usize, usize), TensorError> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if (ra, ca) != (rb, cb) {
            return Err(shape_err(op, format!("{ra}x{ca} vs {rb}x{cb}")));
        }
        Ok((ra, ca))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Populate gradients of every node reachable from `loss`, which must
    /// be a 1x1 scalar. Nodes are visited once each, in reverse recorded
    /// order; gradients from earlier calls are discarded.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(TensorError::NonScalarLoss { rows: r, cols: c });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss].grad = Some(vec![1.0]);
        for id in (0..self.nodes.len()).rev() {
            if self.nodes[id].grad.is_none() {
                continue;
            }
            self.backward_node(id);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, delta: &[f64]) {
        let node = &mut self.nodes[id];
        match &mut node.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => node.grad = Some(delta.to_vec()),
        }
    }

    fn backward_node(&mut self, id: TensorId) {
        let g = self.nodes[id].grad.clone().expect("grad present");
        let op = self.nodes[id].op.clone();
        let (rows, cols) = self.shape(id);
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = self.shape(a);
                let (_, n) = self.shape(b);
                let a_data = Arc::clone(&self.nodes[a].data);
                let b_data = Arc::clone(&self.nodes[b].data);
                let bt = mat_transpose(&b_data, k, n);
                let da = mat_mul(&g, &bt, m, n, k);
                let at = mat_transpose(&a_data, m, k);
                let db = mat_mul(&at, &g, k, m, n);
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Transpose(x) => {
                let dx = mat_transpose(&g, rows, cols);
                self.accumulate(x, &dx);
            }
            Op::Add(a, b) => {
                self.accumulate(a, &g);
                self.accumulate(b, &g);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, &g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                let a_data = Arc::clone(&self.nodes[a].data);
                let b_data = Arc::clone(&self.nodes[b].data);
                let da = zip_map(&g, &b_data, |x, y| x * y);
                let db = zip_map(&g, &a_data, |x, y| x * y);
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accumulate(x, &dx);
            }
            Op::AddScalar(x) => {
                self.accumulate(x, &g);
            }
            Op::Relu(x) => {
                let x_data = Arc::clone(&self.nodes[x].data);
                let dx = zip_map(&g, &x_data, |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                self.accumulate(x, &dx);
            }
            Op::Softmax(x) => {
                let y = Arc::clone(&self.nodes[id].data);
                let mut dx = vec![0.0; rows * cols];
                for i in 0..rows {
                    let yr = &y[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dx[i * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let d = cols;
                let x_data = Arc::clone(&self.nodes[x].data);
                let gain_data = Arc::clone(&self.nodes[gain].data);
                let mut dx = vec![0.0; rows * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for i in 0..rows {
                    let row = &x_data[i * d..(i + 1) * d];
                    let gr = &g[i * d..(i + 1) * d];
                    let (mean, var) = row_mean_var(row);
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let gg: Vec<f64> = gr.iter().zip(gain_data.iter()).map(|(a, b)| a * b).collect();
                    let mean_gg = gg.iter().sum::<f64>() / d as f64;
                    let mean_gg_xhat = gg.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[i * d + j] = inv * (gg[j] - mean_gg - xhat[j] * mean_gg_xhat);
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gain, &dgain);
                self.accumulate(bias, &dbias);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.shape(p);
                    self.accumulate(p, &g[offset..offset + r * c]);
                    offset += r * c;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col_off = 0;
                for p in parts {
                    let (r, c) = self.shape(p);
                    let mut dp = vec![0.0; r * c];
                    for i in 0..r {
                        dp[i * c..(i + 1) * c].copy_from_slice(&g[i * cols + col_off..i * cols + col_off + c]);
                    }
                    self.accumulate(p, &dp);
                    col_off += c;
                }
            }
            Op::SliceRows { x, start } => {
                let (xr, xc) = self.shape(x);
                let mut dx = vec![0.0; xr * xc];
                dx[start * xc..start * xc + g.len()].copy_from_slice(&g);
                self.accumulate(x, &dx);
            }
            Op::GatherRows { x, index } => {
                let (xr, xc) = self.shape(x);
                let mut dx = vec![0.0; xr * xc];
                for (t, &i) in index.iter().enumerate() {
                    for j in 0..xc {
                        dx[i * xc + j] += g[t * xc + j];
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::ScaleRows { x, scale } => {
                let x_data = Arc::clone(&self.nodes[x].data);
                let s_data = Arc::clone(&self.nodes[scale].data);
                let mut dx = vec![0.0; rows * cols];
                let mut ds = vec![0.0; rows];
                for i in 0..rows {
                    for j in 0..cols {
                        dx[i * cols + j] = g[i * cols + j] * s_data[i];
                        ds[i] += g[i * cols + j] * x_data[i * cols + j];
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(scale, &ds);
            }
            Op::AddRow { x, row } => {
                let mut drow = vec![0.0; cols];
                for i in 0..rows {
                    for j in 0..cols {
                        drow[j] += g[i * cols + j];
                    }
                }
                self.accumulate(x, &g);
                self.accumulate(row, &drow);
            }
            Op::Mean(x) => {
                let n = self.nodes[x].data.len();
                let dx = vec![g[0] / n as f64; n];
                self.accumulate(x, &dx);
            }
            Op::Sum(x) => {
                let n = self.nodes[x].data.len();
                let dx = vec![g[0]; n];
                self.accumulate(x, &dx);
            }
            Op::Mse(a, b) => {
                let a_data = Arc::clone(&self.nodes[a].data);
                let b_data = Arc::clone(&self.nodes[b].data);
                let n = a_data.len() as f64;
                let da: Vec<f64> = a_data.iter().zip(b_data.iter()).map(|(x, y)| g[0] * 2.0 * (x - y) / n).collect();
                let db: Vec<f64> = da.iter().map(|v| -v).collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
        }
    }
}

fn mat_mul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn mat_transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

fn row_mean_var(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, var)
}

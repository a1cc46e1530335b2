//! Reverse-mode automatic differentiation on a tape of tensor operations.
//!
//! Operations append nodes to a [`Graph`]; every node's inputs precede it, so
//! topological order holds by construction and the backward pass simply walks
//! the tape in exact reverse construction order. That fixed order (plus fixed
//! reduction order inside every kernel) makes forward values and gradients
//! bit-identical across runs.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Elementwise sum of two same-shape tensors.
    Add(TensorId, TensorId),
    /// `[m x n] + [1 x n]` row-vector bias broadcast (the only broadcast).
    AddBiasRow(TensorId, TensorId),
    /// Elementwise product of two same-shape tensors.
    Mul(TensorId, TensorId),
    /// Multiply by a compile-time constant.
    ScaleConst(TensorId, f64),
    /// Scale row i of `[m x n]` by entry i of an `[m x 1]` column.
    ScaleRows(TensorId, TensorId),
    /// Divide every entry by a `[1 x 1]` scalar tensor.
    DivByScalar(TensorId, TensorId),
    MatMul(TensorId, TensorId),
    Transpose(TensorId),
    /// Metadata-only reshape of contiguous row-major storage.
    Reshape(TensorId),
    SoftmaxRows(TensorId),
    Gelu(TensorId),
    /// Row layer norm with learnable gain/bias (`[1 x n]` each).
    LayerNormRows(TensorId, TensorId, TensorId),
    L2NormalizeRows(TensorId),
    /// out[i] = x[indices[i]]; gradient scatter-adds back.
    RowGather(TensorId, Arc<Vec<usize>>),
    /// zeros[out_rows x n]; out[indices[i]] += x[i].
    RowScatterAdd(TensorId, Arc<Vec<usize>>),
    SumAll(TensorId),
    MeanAll(TensorId),
    /// Mean over rows of (logsumexp(row) - row[target]).
    CrossEntropyMean(TensorId, Arc<Vec<usize>>),
}

impl Op {
    fn inputs(&self) -> Vec<TensorId> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::AddBiasRow(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::ScaleRows(a, b) | Op::DivByScalar(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::LayerNormRows(a, b, c) => vec![a, b, c],
            Op::ScaleConst(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SoftmaxRows(a)
            | Op::Gelu(a)
            | Op::L2NormalizeRows(a)
            | Op::RowGather(a, _)
            | Op::RowScatterAdd(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::CrossEntropyMean(a, _) => vec![a],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    tensor: Tensor,
    /// True when some leaf with `requires_grad` feeds this node.
    requires: bool,
}

/// Tape of operations over [`Tensor`]s with a deterministic backward pass.
#[derive(Debug, Default)]
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

    /// Insert a tensor as a leaf node. Its `requires_grad` flag decides
    /// whether `backward` fills its gradient.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        let requires = tensor.requires_grad;
        self.push(Op::Leaf, tensor, requires)
    }

    /// Leaf that never receives a gradient (masks, index tables, ...).
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<TensorId> {
        Ok(self.leaf(Tensor::new(shape, values)?))
    }

    /// Register a parameter: values are copied in and marked as requiring grad.
    pub fn param(&mut self, tensor: &Tensor) -> TensorId {
        self.leaf(tensor.clone().with_requires_grad())
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].tensor.values
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    /// Gradient of a leaf after `backward` (None if grad never reached it).
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    fn push(&mut self, op: Op, tensor: Tensor, requires: bool) -> TensorId {
        self.nodes.push(Node { op, tensor, requires });
        TensorId(self.nodes.len() - 1)
    }

    fn requires_any(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires)
    }

    fn push_op(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>) -> Result<TensorId> {
        let requires = self.requires_any(&op.inputs());
        let tensor = Tensor::new(shape, values)?;
        Ok(self.push(op, tensor, requires))
    }

    // ── Forward operations ───────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        if ta.shape != tb.shape {
            return Err(Error::Dimension(format!(
                "add shape mismatch: {:?} vs {:?}",
                ta.shape, tb.shape
            )));
        }
        let values = ta
            .values
            .iter()
            .zip(&tb.values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = ta.shape.clone();
        self.push_op(Op::Add(a, b), shape, values)
    }

    pub fn add_bias_row(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.tensor(x).expect_matrix("add_bias_row")?;
        let tb = self.tensor(bias);
        if tb.shape != [1, n] {
            return Err(Error::Dimension(format!(
                "add_bias_row: bias shape {:?} does not match row width {n}",
                tb.shape
            )));
        }
        let tx = self.tensor(x);
        let mut values = Vec::with_capacity(m * n);
        let bias_vals = &self.nodes[bias.0].tensor.values;
        for i in 0..m {
            for j in 0..n {
                values.push(tx.values[i * n + j] + bias_vals[j]);
            }
        }
        self.push_op(Op::AddBiasRow(x, bias), vec![m, n], values)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        if ta.shape != tb.shape {
            return Err(Error::Dimension(format!(
                "mul shape mismatch: {:?} vs {:?}",
                ta.shape, tb.shape
            )));
        }
        let values = ta
            .values
            .iter()
            .zip(&tb.values)
            .map(|(x, y)| x * y)
            .collect();
        let shape = ta.shape.clone();
        self.push_op(Op::Mul(a, b), shape, values)
    }

    pub fn scale_const(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let tx = self.tensor(x);
        let values = tx.values.iter().map(|v| v * c).collect();
        let shape = tx.shape.clone();
        self.push_op(Op::ScaleConst(x, c), shape, values)
    }

    pub fn scale_rows(&mut self, x: TensorId, scale: TensorId) -> Result<TensorId> {
        let (m, n) = self.tensor(x).expect_matrix("scale_rows")?;
        let ts = self.tensor(scale);
        if ts.shape != [m, 1] {
            return Err(Error::Dimension(format!(
                "scale_rows: scale shape {:?}, expected [{m}, 1]",
                ts.shape
            )));
        }
        let tx = self.tensor(x);
        let scale_vals = &self.nodes[scale.0].tensor.values;
        let mut values = Vec::with_capacity(m * n);
        for i in 0..m {
            let s = scale_vals[i];
            values.extend(tx.values[i * n..(i + 1) * n].iter().map(|v| v * s));
        }
        self.push_op(Op::ScaleRows(x, scale), vec![m, n], values)
    }

    pub fn div_by_scalar(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        if !self.tensor(s).is_scalar() {
            return Err(Error::Dimension(format!(
                "div_by_scalar: divisor shape {:?} is not scalar",
                self.tensor(s).shape
            )));
        }
        let sv = self.values(s)[0];
        if sv == 0.0 {
            return Err(Error::Numeric("div_by_scalar: divisor is zero".into()));
        }
        let tx = self.tensor(x);
        let values = tx.values.iter().map(|v| v / sv).collect();
        let shape = tx.shape.clone();
        self.push_op(Op::DivByScalar(x, s), shape, values)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.tensor(a).expect_matrix("matmul lhs")?;
        let (k2, n) = self.tensor(b).expect_matrix("matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul dimension mismatch: [{m} x {k}] by [{k2} x {n}]"
            )));
        }
        let mut values = vec![0.0; m * n];
        matmul_nn(
            &self.nodes[a.0].tensor.values,
            &self.nodes[b.0].tensor.values,
            &mut values,
            m,
            k,
            n,
        );
        self.push_op(Op::MatMul(a, b), vec![m, n], values)
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.tensor(x).expect_matrix("transpose")?;
        let tx = &self.nodes[x.0].tensor.values;
        let mut values = vec![0.0; m * n];
        transpose(tx, &mut values, m, n);
        self.push_op(Op::Transpose(x), vec![n, m], values)
    }

    /// Reshape contiguous storage; metadata-only (values are shared bitwise).
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) || numel != self.tensor(x).numel() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} (={} values) to {:?} (={} values)",
                self.tensor(x).shape,
                self.tensor(x).numel(),
                shape,
                numel
            )));
        }
        let values = self.nodes[x.0].tensor.values.clone();
        self.push_op(Op::Reshape(x), shape, values)
    }

    /// Row-wise softmax with per-row max subtraction for stability.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.tensor(x).expect_matrix("softmax_rows")?;
        let tx = &self.nodes[x.0].tensor.values;
        if tx.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "softmax_rows: input contains non-finite entries".into(),
            ));
        }
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            let row = &tx[i * n..(i + 1) * n];
            let out = &mut values[i * n..(i + 1) * n];
            softmax_into(row, out);
        }
        self.push_op(Op::SoftmaxRows(x), vec![m, n], values)
    }

    /// GELU, tanh approximation (consistent with its backward).
    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        let tx = self.tensor(x);
        let values = tx.values.iter().map(|&v| gelu(v)).collect();
        let shape = tx.shape.clone();
        self.push_op(Op::Gelu(x), shape, values)
    }

    /// Per-row layer normalization with learnable gain and bias (`[1 x n]`).
    pub fn layer_norm_rows(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.tensor(x).expect_matrix("layer_norm_rows")?;
        for (name, id) in [("gain", gain), ("bias", bias)] {
            if self.tensor(id).shape != [1, n] {
                return Err(Error::Dimension(format!(
                    "layer_norm_rows: {name} shape {:?}, expected [1, {n}]",
                    self.tensor(id).shape
                )));
            }
        }
        let tx = &self.nodes[x.0].tensor.values;
        let g = &self.nodes[gain.0].tensor.values;
        let b = &self.nodes[bias.0].tensor.values;
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            let row = &tx[i * n..(i + 1) * n];
            let (mean, inv_std) = row_moments(row);
            for j in 0..n {
                values[i * n + j] = g[j] * (row[j] - mean) * inv_std + b[j];
            }
        }
        self.push_op(Op::LayerNormRows(x, gain, bias), vec![m, n], values)
    }

    /// Normalize each row to unit L2 norm (smoothed by a tiny epsilon).
    pub fn l2_normalize_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.tensor(x).expect_matrix("l2_normalize_rows")?;
        let tx = &self.nodes[x.0].tensor.values;
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            let row = &tx[i * n..(i + 1) * n];
            let inv = 1.0 / l2_norm_eps(row);
            for j in 0..n {
                values[i * n + j] = row[j] * inv;
            }
        }
        self.push_op(Op::L2NormalizeRows(x), vec![m, n], values)
    }

    /// Gather rows: `out[i] = x[indices[i]]`.
    pub fn row_gather(&mut self, x: TensorId, indices: Arc<Vec<usize>>) -> Result<TensorId> {
        let (m, n) = self.tensor(x).expect_matrix("row_gather")?;
        if indices.is_empty() {
            return Err(Error::Contract("row_gather: empty index list".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::Contract(format!(
                "row_gather: index {bad} out of range for {m} rows"
            )));
        }
        let tx = &self.nodes[x.0].tensor.values;
        let mut values = Vec::with_capacity(indices.len() * n);
        for &i in indices.iter() {
            values.extend_from_slice(&tx[i * n..(i + 1) * n]);
        }
        let rows = indices.len();
        self.push_op(Op::RowGather(x, indices), vec![rows, n], values)
    }

    /// Scatter-add rows of `x` into a zero matrix with `out_rows` rows:
    /// `out[indices[i]] += x[i]`. Duplicate indices accumulate in order.
    pub fn row_scatter_add(
        &mut self,
        x: TensorId,
        indices: Arc<Vec<usize>>,
        out_rows: usize,
    ) -> Result<TensorId> {
        let (m, n) = self.tensor(x).expect_matrix("row_scatter_add")?;
        if indices.len() != m {
            return Err(Error::Contract(format!(
                "row_scatter_add: {} indices for {m} rows",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= out_rows) {
            return Err(Error::Contract(format!(
                "row_scatter_add: index {bad} out of range for {out_rows} rows"
            )));
        }
        let tx = &self.nodes[x.0].tensor.values;
        let mut values = vec![0.0; out_rows * n];
        for (i, &dst) in indices.iter().enumerate() {
            let src = &tx[i * n..(i + 1) * n];
            let out = &mut values[dst * n..(dst + 1) * n];
            for (o, s) in out.iter_mut().zip(src) {
                *o += s;
            }
        }
        self.push_op(Op::RowScatterAdd(x, indices), vec![out_rows, n], values)
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.tensor(x).values.iter().sum();
        self.push_op(Op::SumAll(x), vec![1, 1], vec![s])
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let t = self.tensor(x);
        let s: f64 = t.values.iter().sum();
        let mean = s / t.numel() as f64;
        self.push_op(Op::MeanAll(x), vec![1, 1], vec![mean])
    }

    /// Mean cross-entropy of row-wise logits against integer targets.
    pub fn cross_entropy_mean(
        &mut self,
        logits: TensorId,
        targets: Arc<Vec<usize>>,
    ) -> Result<TensorId> {
        let (m, n) = self.tensor(logits).expect_matrix("cross_entropy_mean")?;
        if targets.len() != m {
            return Err(Error::Contract(format!(
                "cross_entropy_mean: {} targets for {m} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Contract(format!(
                "cross_entropy_mean: target {bad} out of range for {n} classes"
            )));
        }
        let tx = &self.nodes[logits.0].tensor.values;
        let mut total = 0.0;
        for (i, &target) in targets.iter().enumerate() {
            let row = &tx[i * n..(i + 1) * n];
            total += log_sum_exp(row) - row[target];
        }
        let mean = total / m as f64;
        self.push_op(Op::CrossEntropyMean(logits, targets), vec![1, 1], vec![mean])
    }

    // ── Backward pass ────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Visits nodes in exact reverse
    /// construction order; gradients accumulate additively over fan-out.
    /// Leaf tensors with `requires_grad` end up with `grad` populated.
    ///
    /// Destructive: intermediate activations are released as soon as their
    /// node has been processed (a processed node's values can no longer be
    /// read by any remaining backward step). Read forward values before
    /// calling this; leaf values survive.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.tensor(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.tensor(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires {
                grads[idx] = None;
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {
                    self.nodes[idx].tensor.grad = Some(gout);
                }
                _ => {
                    self.backprop_op(idx, &op, &gout, &mut grads);
                    self.nodes[idx].tensor.values = Vec::new();
                }
            }
        }
        Ok(())
    }

    fn backprop_op(&self, idx: usize, op: &Op, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Leaf => unreachable!("leaves handled by backward"),
            Op::Add(a, b) => {
                self.accum(grads, a, |_| gout.to_vec());
                self.accum(grads, b, |_| gout.to_vec());
            }
            Op::AddBiasRow(x, bias) => {
                self.accum(grads, x, |_| gout.to_vec());
                let n = self.nodes[bias.0].tensor.numel();
                self.accum(grads, bias, |_| {
                    let mut g = vec![0.0; n];
                    for chunk in gout.chunks_exact(n) {
                        for (gj, cj) in g.iter_mut().zip(chunk) {
                            *gj += cj;
                        }
                    }
                    g
                });
            }
            Op::Mul(a, b) => {
                self.accum(grads, a, |s| {
                    elementwise_mul(gout, &s.nodes[b.0].tensor.values)
                });
                self.accum(grads, b, |s| {
                    elementwise_mul(gout, &s.nodes[a.0].tensor.values)
                });
            }
            Op::ScaleConst(x, c) => {
                self.accum(grads, x, |_| gout.iter().map(|g| g * c).collect());
            }
            Op::ScaleRows(x, scale) => {
                let n = self.nodes[x.0].tensor.cols();
                self.accum(grads, x, |s| {
                    let sv = &s.nodes[scale.0].tensor.values;
                    let mut g = Vec::with_capacity(gout.len());
                    for (i, chunk) in gout.chunks_exact(n).enumerate() {
                        g.extend(chunk.iter().map(|v| v * sv[i]));
                    }
                    g
                });
                self.accum(grads, scale, |s| {
                    let xv = &s.nodes[x.0].tensor.values;
                    gout.chunks_exact(n)
                        .zip(xv.chunks_exact(n))
                        .map(|(gc, xc)| dot(gc, xc))
                        .collect()
                });
            }
            Op::DivByScalar(x, scalar) => {
                let sv = self.nodes[scalar.0].tensor.values[0];
                self.accum(grads, x, |_| gout.iter().map(|g| g / sv).collect());
                self.accum(grads, scalar, |s| {
                    let xv = &s.nodes[x.0].tensor.values;
                    vec![-dot(gout, xv) / (sv * sv)]
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].tensor.rows(), self.nodes[a.0].tensor.cols());
                let n = self.nodes[b.0].tensor.cols();
                self.accum(grads, a, |s| {
                    let mut g = vec![0.0; m * k];
                    matmul_nt(gout, &s.nodes[b.0].tensor.values, &mut g, m, n, k);
                    g
                });
                self.accum(grads, b, |s| {
                    let mut g = vec![0.0; k * n];
                    matmul_tn(&s.nodes[a.0].tensor.values, gout, &mut g, m, k, n);
                    g
                });
            }
            Op::Transpose(x) => {
                let (m, n) = (self.nodes[x.0].tensor.rows(), self.nodes[x.0].tensor.cols());
                self.accum(grads, x, |_| {
                    let mut g = vec![0.0; m * n];
                    // gout has shape [n x m]; transpose back.
                    transpose(gout, &mut g, n, m);
                    g
                });
            }
            Op::Reshape(x) => {
                self.accum(grads, x, |_| gout.to_vec());
            }
            Op::SoftmaxRows(x) => {
                let n = self.nodes[idx].tensor.cols();
                let y = &self.nodes[idx].tensor.values;
                self.accum(grads, x, |_| {
                    let mut g = Vec::with_capacity(gout.len());
                    for (gc, yc) in gout.chunks_exact(n).zip(y.chunks_exact(n)) {
                        let inner = dot(gc, yc);
                        g.extend(gc.iter().zip(yc).map(|(gj, yj)| yj * (gj - inner)));
                    }
                    g
                });
            }
            Op::Gelu(x) => {
                self.accum(grads, x, |s| {
                    s.nodes[x.0]
                        .tensor
                        .values
                        .iter()
                        .zip(gout)
                        .map(|(&v, g)| g * gelu_derivative(v))
                        .collect()
                });
            }
            Op::LayerNormRows(x, gain, bias) => {
                let n = self.nodes[x.0].tensor.cols();
                let xv = &self.nodes[x.0].tensor.values;
                let gv = &self.nodes[gain.0].tensor.values;
                self.accum(grads, bias, |_| {
                    let mut g = vec![0.0; n];
                    for chunk in gout.chunks_exact(n) {
                        for (gj, cj) in g.iter_mut().zip(chunk) {
                            *gj += cj;
                        }
                    }
                    g
                });
                self.accum(grads, gain, |_| {
                    let mut g = vec![0.0; n];
                    for (gc, xc) in gout.chunks_exact(n).zip(xv.chunks_exact(n)) {
                        let (mean, inv_std) = row_moments(xc);
                        for j in 0..n {
                            g[j] += gc[j] * (xc[j] - mean) * inv_std;
                        }
                    }
                    g
                });
                self.accum(grads, x, |_| {
                    let mut g = Vec::with_capacity(gout.len());
                    for (gc, xc) in gout.chunks_exact(n).zip(xv.chunks_exact(n)) {
                        let (mean, inv_std) = row_moments(xc);
                        // d/dx of gain * xhat + bias, with xhat = (x - mean) * inv_std
                        let dxhat: Vec<f64> = gc.iter().zip(gv).map(|(g, w)| g * w).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dxhat_xhat = dxhat
                            .iter()
                            .zip(xc)
                            .map(|(d, &x)| d * (x - mean) * inv_std)
                            .sum::<f64>()
                            / n as f64;
                        for j in 0..n {
                            let xhat = (xc[j] - mean) * inv_std;
                            g.push(inv_std * (dxhat[j] - mean_dxhat - xhat * mean_dxhat_xhat));
                        }
                    }
                    g
                });
            }
            Op::L2NormalizeRows(x) => {
                let n = self.nodes[x.0].tensor.cols();
                let xv = &self.nodes[x.0].tensor.values;
                self.accum(grads, x, |_| {
                    let mut g = Vec::with_capacity(gout.len());
                    for (gc, xc) in gout.chunks_exact(n).zip(xv.chunks_exact(n)) {
                        let norm = l2_norm_eps(xc);
                        let inv = 1.0 / norm;
                        let inner = dot(gc, xc);
                        for j in 0..n {
                            g.push(inv * gc[j] - inv.powi(3) * xc[j] * inner);
                        }
                    }
                    g
                });
            }
            Op::RowGather(x, ref indices) => {
                let (rows, n) = (self.nodes[x.0].tensor.rows(), self.nodes[x.0].tensor.cols());
                self.accum(grads, x, |_| {
                    let mut g = vec![0.0; rows * n];
                    for (i, &src) in indices.iter().enumerate() {
                        let out = &mut g[src * n..(src + 1) * n];
                        for (o, v) in out.iter_mut().zip(&gout[i * n..(i + 1) * n]) {
                            *o += v;
                        }
                    }
                    g
                });
            }
            Op::RowScatterAdd(x, ref indices) => {
                let n = self.nodes[x.0].tensor.cols();
                self.accum(grads, x, |_| {
                    let mut g = Vec::with_capacity(indices.len() * n);
                    for &dst in indices.iter() {
                        g.extend_from_slice(&gout[dst * n..(dst + 1) * n]);
                    }
                    g
                });
            }
            Op::SumAll(x) => {
                let numel = self.nodes[x.0].tensor.numel();
                self.accum(grads, x, |_| vec![gout[0]; numel]);
            }
            Op::MeanAll(x) => {
                let numel = self.nodes[x.0].tensor.numel();
                self.accum(grads, x, |_| vec![gout[0] / numel as f64; numel]);
            }
            Op::CrossEntropyMean(logits, ref targets) => {
                let (m, n) = (
                    self.nodes[logits.0].tensor.rows(),
                    self.nodes[logits.0].tensor.cols(),
                );
                let lv = &self.nodes[logits.0].tensor.values;
                self.accum(grads, logits, |_| {
                    let scale = gout[0] / m as f64;
                    let mut g = vec![0.0; m * n];
                    for (i, &target) in targets.iter().enumerate() {
                        let row = &lv[i * n..(i + 1) * n];
                        let out = &mut g[i * n..(i + 1) * n];
                        softmax_into(row, out);
                        for v in out.iter_mut() {
                            *v *= scale;
                        }
                        out[target] -= scale;
                    }
                    g
                });
            }
        }
    }

    /// Accumulate a gradient contribution into a slot, skipping inputs that
    /// do not require gradients.
    fn accum<F>(&self, grads: &mut [Option<Vec<f64>>], id: TensorId, make: F)
    where
        F: FnOnce(&Self) -> Vec<f64>,
    {
        if !self.nodes[id.0].requires {
            return;
        }
        let contribution = make(self);
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }
}

// ── Kernels ──────────────────────────────────────────────────────────

/// C[m x n] = A[m x k] * B[k x n]. Per-row sequential accumulation keeps the
/// reduction order fixed.
fn matmul_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (t, &av) in arow.iter().enumerate() {
            let brow = &b[t * n..(t + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C[m x k] = A[m x n] * B^T where B is [k x n].
fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (t, cv) in crow.iter_mut().enumerate() {
            *cv = dot(arow, &b[t * n..(t + 1) * n]);
        }
    }
}

/// C[k x n] = A^T * B where A is [m x k], B is [m x n].
fn matmul_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[t * n..(t + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn transpose(x: &[f64], out: &mut [f64], m: usize, n: usize) {
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
}

/// Dot product with eight fixed-order lane accumulators. The lane layout is
/// constant, so results are bit-reproducible run to run (and the compiler can
/// vectorize the independent lanes, unlike a single sequential sum).
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (ac, bc) = (&a[i * 8..(i + 1) * 8], &b[i * 8..(i + 1) * 8]);
        for j in 0..8 {
            lanes[j] += ac[j] * bc[j];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    (((lanes[0] + lanes[4]) + (lanes[2] + lanes[6]))
        + ((lanes[1] + lanes[5]) + (lanes[3] + lanes[7])))
        + tail
}

fn elementwise_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        total += e;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    const EPS: f64 = 1e-5;
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + EPS).sqrt())
}

fn l2_norm_eps(row: &[f64]) -> f64 {
    const EPS: f64 = 1e-12;
    (row.iter().map(|&v| v * v).sum::<f64>() + EPS).sqrt()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

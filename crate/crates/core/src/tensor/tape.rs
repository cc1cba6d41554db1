//! Reverse-mode tape over [`Tensor`] values.

use super::kernels;
use super::{Mode, Tensor, TensorError};
use crate::rng::SplitMix64;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    MatMulNt { a: usize, b: usize },
    SoftmaxRows { x: usize },
    LayerNormRows { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: usize, mask: Vec<f64> },
    Relu { x: usize },
    Tanh { x: usize },
    Sigmoid { x: usize },
    Add { a: usize, b: usize },
    AddBroadcastRow { x: usize, v: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    ConcatCols { a: usize, b: usize },
    MeanRows { x: usize },
    Embedding { table: usize, row: usize },
    CrossEntropy { logits: usize, target: usize, probs: Vec<f64> },
    Sum { x: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    label: &'static str,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records a forward computation; nodes are appended in topological order,
/// so one reverse sweep propagates gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_run: bool,
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

    fn push(&mut self, value: Tensor, op: Op, label: &'static str, needs_grad: bool) -> TensorId {
        self.nodes.push(Node { value, op, label, needs_grad, grad: None });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Insert a constant input (no gradient tracked).
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf, "leaf", false)
    }

    /// Insert a trainable parameter; its gradient is available after
    /// [`Tape::backward`].
    pub fn param(&mut self, value: &Tensor) -> TensorId {
        self.push(value.clone(), Op::Leaf, "param", true)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass with respect to `id`, if tracked.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// First tape entry holding a non-finite value, as (node index, op label).
    pub fn find_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.value.data().iter().any(|v| !v.is_finite()))
            .map(|(i, n)| (i, n.label))
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize), TensorError> {
        self.value(id).dims2().ok_or_else(|| TensorError::ShapeMismatch {
            op,
            lhs: self.value(id).shape().to_vec(),
            rhs: vec![],
        })
    }

    /// Matrix product a[m×p] · b[p×n].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, p) = self.dims2(a, "matmul")?;
        let (p2, n) = self.dims2(b, "matmul")?;
        if p != p2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, p, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::MatMul { a: a.0, b: b.0 }, "matmul", needs))
    }

    /// a[m×p] · b[n×p]ᵀ, i.e. pairwise row dot products.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, p) = self.dims2(a, "matmul_nt")?;
        let (n, p2) = self.dims2(b, "matmul_nt")?;
        if p != p2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, p, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::MatMulNt { a: a.0, b: b.0 }, "matmul_nt", needs))
    }

    /// Row-wise softmax, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = self.dims2(x, "softmax_rows")?;
        let xs = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::SoftmaxRows { x: x.0 }, "softmax_rows", needs))
    }

    /// Row-wise layer normalization with learned gain and bias:
    /// every row is shifted to zero mean and scaled by 1/sqrt(var + eps).
    pub fn layer_norm_rows(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let (m, d) = self.dims2(x, "layer_norm_rows")?;
        for v in [gain, bias] {
            if self.value(v).numel() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm_rows",
                    lhs: self.value(x).shape().to_vec(),
                    rhs: self.value(v).shape().to_vec(),
                });
            }
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut data = vec![0.0; m * d];
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                data[i * d + j] = h * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Tensor::matrix(m, d, data)?,
            Op::LayerNormRows { x: x.0, gain: gain.0, bias: bias.0, xhat, inv_std },
            "layer_norm_rows",
            needs,
        ))
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `p` and survivors are scaled by 1/(1-p); eval mode is the
    /// identity, so no rescale is needed at inference time.
    pub fn dropout(
        &mut self,
        x: TensorId,
        p: f64,
        mode: Mode,
        rng: &mut SplitMix64,
    ) -> Result<TensorId, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidProbability(p));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(self.scale(x, 1.0));
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|_| if rng.next_f64() < p { 0.0 } else { keep })
            .collect();
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        )?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Dropout { x: x.0, mask }, "dropout", needs))
    }

    fn unary(
        &mut self,
        x: TensorId,
        label: &'static str,
        op: impl Fn(usize) -> Op,
        f: impl Fn(f64) -> f64,
    ) -> TensorId {
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|&v| f(v)).collect(),
        )
        .expect("shape preserved");
        let needs = self.needs(x);
        self.push(value, op(x.0), label, needs)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(x, "relu", |x| Op::Relu { x }, |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        self.unary(x, "tanh", |x| Op::Tanh { x }, f64::tanh)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(x, "sigmoid", |x| Op::Sigmoid { x }, |v| 1.0 / (1.0 + (-v).exp()))
    }

    fn binary_same_shape(
        &self,
        a: TensorId,
        b: TensorId,
        op: &'static str,
    ) -> Result<(), TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_same_shape(a, b, "add")?;
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect(),
        )?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, "add", needs))
    }

    /// x[m×d] + v broadcast over rows; `v` may be rank-1 [d] or [1×d].
    pub fn add_broadcast_row(&mut self, x: TensorId, v: TensorId) -> Result<TensorId, TensorError> {
        let (m, d) = self.dims2(x, "add_broadcast_row")?;
        if self.value(v).numel() != d {
            return Err(TensorError::ShapeMismatch {
                op: "add_broadcast_row",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(v).shape().to_vec(),
            });
        }
        let vs = self.value(v).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            for j in 0..d {
                data[i * d + j] += vs[j];
            }
        }
        let needs = self.needs(x) || self.needs(v);
        Ok(self.push(
            Tensor::matrix(m, d, data)?,
            Op::AddBroadcastRow { x: x.0, v: v.0 },
            "add_broadcast_row",
            needs,
        ))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_same_shape(a, b, "mul")?;
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect(),
        )?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }, "mul", needs))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|v| v * c).collect(),
        )
        .expect("shape preserved");
        let needs = self.needs(x);
        self.push(value, Op::Scale { x: x.0, c }, "scale", needs)
    }

    /// [a | b] along columns.
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, p) = self.dims2(a, "concat_cols")?;
        let (m2, q) = self.dims2(b, "concat_cols")?;
        if m != m2 {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(&self.value(a).data()[i * p..(i + 1) * p]);
            data.extend_from_slice(&self.value(b).data()[i * q..(i + 1) * q]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::matrix(m, p + q, data)?,
            Op::ConcatCols { a: a.0, b: b.0 },
            "concat_cols",
            needs,
        ))
    }

    /// Column-wise average of the rows: x[m×d] → [1×d].
    pub fn mean_rows(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let (m, d) = self.dims2(x, "mean_rows")?;
        let xs = self.value(x).data();
        let mut data = vec![0.0; d];
        for i in 0..m {
            for j in 0..d {
                data[j] += xs[i * d + j];
            }
        }
        for v in &mut data {
            *v /= m as f64;
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::matrix(1, d, data)?, Op::MeanRows { x: x.0 }, "mean_rows", needs))
    }

    /// Row `row` of `table` as a [1×d] tensor.
    pub fn embedding_lookup(&mut self, table: TensorId, row: usize) -> Result<TensorId, TensorError> {
        let (rows, d) = self.dims2(table, "embedding_lookup")?;
        if row >= rows {
            return Err(TensorError::IndexOutOfRange { row, rows });
        }
        let data = self.value(table).data()[row * d..(row + 1) * d].to_vec();
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::matrix(1, d, data)?,
            Op::Embedding { table: table.0, row },
            "embedding_lookup",
            needs,
        ))
    }

    /// Negative log-softmax of `logits` at `target`, as a [1×1] tensor.
    pub fn cross_entropy(&mut self, logits: TensorId, target: usize) -> Result<TensorId, TensorError> {
        let classes = self.value(logits).numel();
        if target >= classes {
            return Err(TensorError::TargetOutOfRange { target, classes });
        }
        let ls = self.value(logits).data();
        let max = ls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = ls.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
        let loss = sum.ln() + max - ls[target];
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: logits.0, target, probs },
            "cross_entropy",
            needs,
        ))
    }

    /// Sum of all entries, as a [1×1] tensor.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let total = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum { x: x.0 }, "sum", needs)
    }

    /// Propagate gradients from a scalar loss to every `param` leaf.
    /// A second call on the same tape is an error.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.backward_run {
            return Err(TensorError::BackwardConsumed);
        }
        self.backward_run = true;
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(TensorError::NotScalar { shape: loss_node.value.shape().to_vec() });
        }
        for node in &mut self.nodes {
            if node.needs_grad {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        if let Some(g) = self.nodes[loss.0].grad.as_mut() {
            g[0] = 1.0;
        } else {
            // Loss does not depend on any parameter; nothing to do.
            return Ok(());
        }
        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.clone().unwrap();
            self.backprop_node(i, &g);
        }
        Ok(())
    }

    fn add_grad(&mut self, node: usize, delta: impl Fn(usize) -> f64) {
        if let Some(grad) = self.nodes[node].grad.as_mut() {
            for (j, g) in grad.iter_mut().enumerate() {
                *g += delta(j);
            }
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Replace the op with a zero-input placeholder to end the borrow of
        // self.nodes[i] before accumulating into input nodes.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, p) = self.nodes[*a].value.dims2().unwrap();
                let n = self.nodes[i].value.dims2().unwrap().1;
                if self.nodes[*a].grad.is_some() {
                    let da = kernels::matmul_nt(g, self.nodes[*b].value.data(), m, n, p);
                    self.add_grad(*a, |j| da[j]);
                }
                if self.nodes[*b].grad.is_some() {
                    let db = kernels::matmul_tn(self.nodes[*a].value.data(), g, m, p, n);
                    self.add_grad(*b, |j| db[j]);
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, p) = self.nodes[*a].value.dims2().unwrap();
                let n = self.nodes[i].value.dims2().unwrap().1;
                if self.nodes[*a].grad.is_some() {
                    let da = kernels::matmul(g, self.nodes[*b].value.data(), m, n, p);
                    self.add_grad(*a, |j| da[j]);
                }
                if self.nodes[*b].grad.is_some() {
                    let db = kernels::matmul_tn(g, self.nodes[*a].value.data(), m, n, p);
                    self.add_grad(*b, |j| db[j]);
                }
            }
            Op::SoftmaxRows { x } => {
                let y = self.nodes[i].value.clone();
                let (m, n) = y.dims2().unwrap();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for c in 0..n {
                        dx[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.add_grad(*x, |j| dx[j]);
            }
            Op::LayerNormRows { x, gain, bias, xhat, inv_std } => {
                let (m, d) = self.nodes[*x].value.dims2().unwrap();
                let gain_v = self.nodes[*gain].value.data().to_vec();
                if self.nodes[*bias].grad.is_some() {
                    let mut db = vec![0.0; d];
                    for r in 0..m {
                        for c in 0..d {
                            db[c] += g[r * d + c];
                        }
                    }
                    self.add_grad(*bias, |j| db[j]);
                }
                if self.nodes[*gain].grad.is_some() {
                    let mut dg = vec![0.0; d];
                    for r in 0..m {
                        for c in 0..d {
                            dg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                    self.add_grad(*gain, |j| dg[j]);
                }
                if self.nodes[*x].grad.is_some() {
                    let mut dx = vec![0.0; m * d];
                    for r in 0..m {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_xhat = 0.0;
                        for c in 0..d {
                            let dh = g[r * d + c] * gain_v[c];
                            mean_dh += dh;
                            mean_dh_xhat += dh * xhat[r * d + c];
                        }
                        mean_dh /= d as f64;
                        mean_dh_xhat /= d as f64;
                        for c in 0..d {
                            let dh = g[r * d + c] * gain_v[c];
                            dx[r * d + c] =
                                inv_std[r] * (dh - mean_dh - xhat[r * d + c] * mean_dh_xhat);
                        }
                    }
                    self.add_grad(*x, |j| dx[j]);
                }
            }
            Op::Dropout { x, mask } => {
                self.add_grad(*x, |j| g[j] * mask[j]);
            }
            Op::Relu { x } => {
                let xs = self.nodes[*x].value.data().to_vec();
                self.add_grad(*x, |j| if xs[j] > 0.0 { g[j] } else { 0.0 });
            }
            Op::Tanh { x } => {
                let y = self.nodes[i].value.data().to_vec();
                self.add_grad(*x, |j| g[j] * (1.0 - y[j] * y[j]));
            }
            Op::Sigmoid { x } => {
                let y = self.nodes[i].value.data().to_vec();
                self.add_grad(*x, |j| g[j] * y[j] * (1.0 - y[j]));
            }
            Op::Add { a, b } => {
                self.add_grad(*a, |j| g[j]);
                self.add_grad(*b, |j| g[j]);
            }
            Op::AddBroadcastRow { x, v } => {
                self.add_grad(*x, |j| g[j]);
                if self.nodes[*v].grad.is_some() {
                    let d = self.nodes[*v].value.numel();
                    let mut dv = vec![0.0; d];
                    for (j, gj) in g.iter().enumerate() {
                        dv[j % d] += gj;
                    }
                    self.add_grad(*v, |j| dv[j]);
                }
            }
            Op::Mul { a, b } => {
                let av = self.nodes[*a].value.data().to_vec();
                let bv = self.nodes[*b].value.data().to_vec();
                self.add_grad(*a, |j| g[j] * bv[j]);
                self.add_grad(*b, |j| g[j] * av[j]);
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.add_grad(*x, |j| g[j] * c);
            }
            Op::ConcatCols { a, b } => {
                let p = self.nodes[*a].value.dims2().unwrap().1;
                let q = self.nodes[*b].value.dims2().unwrap().1;
                self.add_grad(*a, |j| g[(j / p) * (p + q) + (j % p)]);
                self.add_grad(*b, |j| g[(j / q) * (p + q) + p + (j % q)]);
            }
            Op::MeanRows { x } => {
                let (m, d) = self.nodes[*x].value.dims2().unwrap();
                let scale = 1.0 / m as f64;
                self.add_grad(*x, |j| g[j % d] * scale);
            }
            Op::Embedding { table, row } => {
                let d = self.nodes[i].value.numel();
                let offset = row * d;
                self.add_grad(*table, |j| {
                    if j >= offset && j < offset + d {
                        g[j - offset]
                    } else {
                        0.0
                    }
                });
            }
            Op::CrossEntropy { logits, target, probs } => {
                let t = *target;
                self.add_grad(*logits, |j| g[0] * (probs[j] - if j == t { 1.0 } else { 0.0 }));
            }
            Op::Sum { x } => {
                self.add_grad(*x, |_| g[0]);
            }
        }
        self.nodes[i].op = op;
    }
}

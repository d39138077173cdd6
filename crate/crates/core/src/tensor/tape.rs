//! Define-by-run tape for reverse-mode differentiation.
//!
//! A tape is rebuilt for every forward pass. Each op validates shapes,
//! computes its value eagerly and records the backward rule; `backward`
//! walks the nodes in exact reverse recording order, accumulating adjoints
//! additively so a value used twice receives the sum of both paths.

use super::{matmul_raw, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Matrix plus a row-broadcast 1-D bias.
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    SoftmaxLast(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        kept: Vec<bool>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        width: usize,
    },
    ConcatCols(Vec<NodeId>),
    Transpose(NodeId),
    Scale(NodeId, T),
    /// Add a constant buffer (attention masks); no gradient flows into it.
    AddConst(NodeId),
    Sum(NodeId),
}

struct Node<T> {
    data: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Drop all recorded nodes and gradients, keeping allocations out of it.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            data,
            shape,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Record a leaf holding a copy of `t`'s data.
    pub fn leaf(&mut self, t: &Tensor<T>) -> NodeId {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Leaf from raw parts; `requires_grad` controls gradient tracking.
    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> NodeId {
        self.push(data, shape, Op::Leaf, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Scalar value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> T {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    /// Gradient of a node after [`Tape::backward`] has run.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                left: s.to_vec(),
                right: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    // ── Ops ────────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data = matmul_raw(self.value(a), self.value(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(data, vec![m, n], Op::MatMul(a, b), needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, Op::Add(a, b), needs))
    }

    /// `x [m×n] + bias [n]`, the only broadcast form supported.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "add_bias")?;
        if self.shape(bias) != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let xv = self.value(x);
        let bv = self.value(bias);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(xv[i * n + j] + bv[j]);
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(data, vec![m, n], Op::AddBias(x, bias), needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, Op::Mul(a, b), needs))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<T> = self
            .value(x)
            .iter()
            .map(|&v| if v > T::ZERO { v } else { T::ZERO })
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(data, shape, Op::Relu(x), needs)
    }

    /// Exact-erf gelu: `0.5·x·(1 + erf(x/√2))`.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let data: Vec<T> = self
            .value(x)
            .iter()
            .map(|&v| half * v * (T::ONE + (v * inv_sqrt2).erf()))
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(data, shape, Op::Gelu(x), needs)
    }

    /// Softmax over the last dimension, stabilized by max subtraction.
    pub fn softmax_lastdim(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("non-empty shape");
        let xv = self.value(x);
        let mut data = vec![T::ZERO; xv.len()];
        for (row_in, row_out) in xv.chunks_exact(n).zip(data.chunks_exact_mut(n)) {
            softmax_row(row_in, row_out);
        }
        let needs = self.needs(x);
        self.push(data, shape, Op::SoftmaxLast(x), needs)
    }

    /// Per-last-dim normalization followed by the `gamma`/`beta` affine.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("non-empty shape");
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: shape,
                right: self.shape(gamma).to_vec(),
            });
        }
        let xv = self.value(x);
        let gv = self.value(gamma).to_vec();
        let bv = self.value(beta).to_vec();
        let mut data = vec![T::ZERO; xv.len()];
        let inv_n = T::from_f64(1.0 / n as f64);
        for (row_in, row_out) in xv.chunks_exact(n).zip(data.chunks_exact_mut(n)) {
            let mut mean = T::ZERO;
            for &v in row_in {
                mean += v;
            }
            mean = mean * inv_n;
            let mut var = T::ZERO;
            for &v in row_in {
                let d = v - mean;
                var += d * d;
            }
            var = var * inv_n;
            let inv_std = T::ONE / (var + eps).sqrt();
            for j in 0..n {
                row_out[j] = gv[j] * ((row_in[j] - mean) * inv_std) + bv[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            data,
            self.shape(x).to_vec(),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            needs,
        ))
    }

    /// Mean negative log-softmax over positions whose target differs from
    /// `ignore_id`. Scalar output.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        ignore_id: usize,
    ) -> Result<NodeId> {
        let (t, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != t {
            return Err(Error::Contract(format!(
                "cross_entropy: {t} logit rows but {} targets",
                targets.len()
            )));
        }
        let kept: Vec<bool> = targets.iter().map(|&id| id != ignore_id).collect();
        for (&id, &keep) in targets.iter().zip(&kept) {
            if keep && id >= v {
                return Err(Error::IndexOutOfRange {
                    index: id,
                    bound: v,
                });
            }
        }
        let n_kept = kept.iter().filter(|&&k| k).count();
        if n_kept == 0 {
            return Err(Error::UndefinedLoss);
        }
        let lv = self.value(logits);
        let mut loss = T::ZERO;
        for (row, (&target, &keep)) in lv.chunks_exact(v).zip(targets.iter().zip(&kept)) {
            if keep {
                loss += log_sum_exp(row) - row[target];
            }
        }
        loss = loss * (T::ONE / T::from_f64(n_kept as f64));
        let needs = self.needs(logits);
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                kept,
            },
            needs,
        ))
    }

    /// Gather rows of `table [rows×d]` at `ids`, producing `[len(ids)×d]`.
    pub fn embedding_gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, d) = self.dims2(table, "embedding_gather")?;
        if ids.is_empty() {
            return Err(Error::Contract("embedding_gather: empty id list".into()));
        }
        for &id in ids {
            if id >= rows {
                return Err(Error::IndexOutOfRange {
                    index: id,
                    bound: rows,
                });
            }
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            data,
            vec![ids.len(), d],
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Column block `[.., start..start+width]` of a matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start + width > n {
            return Err(Error::IndexOutOfRange {
                index: start + width,
                bound: n,
            });
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&xv[i * n + start..i * n + start + width]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            data,
            vec![m, width],
            Op::SliceCols { x, start, width },
            needs,
        ))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols: no inputs".into()));
        }
        let (m, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.dims2(p, "concat_cols")?;
            if mp != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(np);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pv = self.value(p);
                data.extend_from_slice(&pv[i * w..(i + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(data, vec![m, n], Op::ConcatCols(parts.to_vec()), needs))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "transpose")?;
        let xv = self.value(x);
        let mut data = vec![T::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xv[i * n + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(data, vec![n, m], Op::Transpose(x), needs))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let data: Vec<T> = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(data, shape, Op::Scale(x, c), needs)
    }

    /// Add a constant buffer of matching length (additive attention mask).
    pub fn add_const(&mut self, x: NodeId, constant: &[T]) -> Result<NodeId> {
        if constant.len() != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "add_const",
                left: self.shape(x).to_vec(),
                right: vec![constant.len()],
            });
        }
        let data: Vec<T> = self
            .value(x)
            .iter()
            .zip(constant)
            .map(|(&a, &c)| a + c)
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(data, shape, Op::AddConst(x), needs))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut s = T::ZERO;
        for &v in self.value(x) {
            s += v;
        }
        let needs = self.needs(x);
        self.push(vec![s], vec![1], Op::Sum(x), needs)
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Afterwards, [`Tape::grad`] holds
    /// `∂loss/∂node` for every gradient-tracked node reachable from it.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::ONE]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(out_grad) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &out_grad);
            self.grads[idx] = Some(out_grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: Vec<T>) {
        match &mut self.grads[id.0] {
            Some(g) => {
                for (gi, d) in g.iter_mut().zip(delta) {
                    *gi += d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn accumulate_at(&mut self, id: NodeId, f: impl FnOnce(&mut [T])) {
        let len = self.nodes[id.0].data.len();
        let g = self.grads[id.0].get_or_insert_with(|| vec![T::ZERO; len]);
        f(g);
    }

    fn propagate(&mut self, idx: usize, dy: &[T]) {
        // Ops only reference earlier nodes, so borrows of node data below
        // never alias the grad buffers being written.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let m = self.nodes[a.0].shape[0];
                let k = self.nodes[a.0].shape[1];
                let n = self.nodes[b.0].shape[1];
                if self.needs(a) {
                    // dA[i,p] = Σ_j dy[i,j]·B[p,j]
                    let bv = &self.nodes[b.0].data;
                    let mut da = vec![T::ZERO; m * k];
                    for i in 0..m {
                        let dy_row = &dy[i * n..(i + 1) * n];
                        let da_row = &mut da[i * k..(i + 1) * k];
                        for p in 0..k {
                            let b_row = &bv[p * n..(p + 1) * n];
                            let mut s = T::ZERO;
                            for j in 0..n {
                                s += dy_row[j] * b_row[j];
                            }
                            da_row[p] = s;
                        }
                    }
                    self.accumulate(a, da);
                }
                if self.needs(b) {
                    // dB[p,j] = Σ_i A[i,p]·dy[i,j]
                    let av = &self.nodes[a.0].data;
                    let mut db = vec![T::ZERO; k * n];
                    for i in 0..m {
                        let a_row = &av[i * k..(i + 1) * k];
                        let dy_row = &dy[i * n..(i + 1) * n];
                        for (p, &a_ip) in a_row.iter().enumerate() {
                            let db_row = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                db_row[j] += a_ip * dy_row[j];
                            }
                        }
                    }
                    self.accumulate(b, db);
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    self.accumulate(a, dy.to_vec());
                }
                if self.needs(b) {
                    self.accumulate(b, dy.to_vec());
                }
            }
            Op::AddBias(x, bias) => {
                let (x, bias) = (*x, *bias);
                let n = self.nodes[bias.0].data.len();
                if self.needs(x) {
                    self.accumulate(x, dy.to_vec());
                }
                if self.needs(bias) {
                    let mut db = vec![T::ZERO; n];
                    for row in dy.chunks_exact(n) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.accumulate(bias, db);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let bv = &self.nodes[b.0].data;
                    let da: Vec<T> = dy.iter().zip(bv).map(|(&g, &v)| g * v).collect();
                    self.accumulate(a, da);
                }
                if self.needs(b) {
                    let av = &self.nodes[a.0].data;
                    let db: Vec<T> = dy.iter().zip(av).map(|(&g, &v)| g * v).collect();
                    self.accumulate(b, db);
                }
            }
            Op::Relu(x) => {
                let x = *x;
                if self.needs(x) {
                    let xv = &self.nodes[x.0].data;
                    let dx: Vec<T> = dy
                        .iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v > T::ZERO { g } else { T::ZERO })
                        .collect();
                    self.accumulate(x, dx);
                }
            }
            Op::Gelu(x) => {
                let x = *x;
                if self.needs(x) {
                    let half = T::from_f64(0.5);
                    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                    let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                    let xv = &self.nodes[x.0].data;
                    // d/dx [x·Φ(x)] = Φ(x) + x·φ(x)
                    let dx: Vec<T> = dy
                        .iter()
                        .zip(xv)
                        .map(|(&g, &v)| {
                            let cdf = half * (T::ONE + (v * inv_sqrt2).erf());
                            let pdf = inv_sqrt_2pi * (-(v * v) * half).exp();
                            g * (cdf + v * pdf)
                        })
                        .collect();
                    self.accumulate(x, dx);
                }
            }
            Op::SoftmaxLast(x) => {
                let x = *x;
                if self.needs(x) {
                    let n = *self.nodes[idx].shape.last().unwrap();
                    let yv = &self.nodes[idx].data;
                    let mut dx = vec![T::ZERO; yv.len()];
                    for ((y_row, dy_row), dx_row) in yv
                        .chunks_exact(n)
                        .zip(dy.chunks_exact(n))
                        .zip(dx.chunks_exact_mut(n))
                    {
                        let mut dot = T::ZERO;
                        for (&y, &g) in y_row.iter().zip(dy_row) {
                            dot += y * g;
                        }
                        for j in 0..n {
                            dx_row[j] = y_row[j] * (dy_row[j] - dot);
                        }
                    }
                    self.accumulate(x, dx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let n = *self.nodes[x.0].shape.last().unwrap();
                let inv_n = T::ONE / T::from_f64(n as f64);
                let xv = self.nodes[x.0].data.clone();
                let gv = self.nodes[gamma.0].data.clone();
                let needs_x = self.needs(x);
                let needs_g = self.needs(gamma);
                let needs_b = self.needs(beta);
                let mut dx = vec![T::ZERO; xv.len()];
                let mut dg = vec![T::ZERO; n];
                let mut db = vec![T::ZERO; n];
                for (row_idx, (x_row, dy_row)) in
                    xv.chunks_exact(n).zip(dy.chunks_exact(n)).enumerate()
                {
                    let mut mean = T::ZERO;
                    for &v in x_row {
                        mean += v;
                    }
                    mean = mean * inv_n;
                    let mut var = T::ZERO;
                    for &v in x_row {
                        let d = v - mean;
                        var += d * d;
                    }
                    var = var * inv_n;
                    let inv_std = T::ONE / (var + eps).sqrt();
                    // x̂ per element, reused by all three adjoints.
                    let xhat: Vec<T> = x_row.iter().map(|&v| (v - mean) * inv_std).collect();
                    if needs_g || needs_b {
                        for j in 0..n {
                            dg[j] += dy_row[j] * xhat[j];
                            db[j] += dy_row[j];
                        }
                    }
                    if needs_x {
                        // dx = inv_std·(t − mean(t) − x̂·mean(t·x̂)), t = γ⊙dy
                        let mut mean_t = T::ZERO;
                        let mut mean_tx = T::ZERO;
                        for j in 0..n {
                            let t = gv[j] * dy_row[j];
                            mean_t += t;
                            mean_tx += t * xhat[j];
                        }
                        mean_t = mean_t * inv_n;
                        mean_tx = mean_tx * inv_n;
                        let dx_row = &mut dx[row_idx * n..(row_idx + 1) * n];
                        for j in 0..n {
                            let t = gv[j] * dy_row[j];
                            dx_row[j] = inv_std * (t - mean_t - xhat[j] * mean_tx);
                        }
                    }
                }
                if needs_x {
                    self.accumulate(x, dx);
                }
                if needs_g {
                    self.accumulate(gamma, dg);
                }
                if needs_b {
                    self.accumulate(beta, db);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                kept,
            } => {
                let logits = *logits;
                if self.needs(logits) {
                    let v = self.nodes[logits.0].shape[1];
                    let n_kept = kept.iter().filter(|&&k| k).count();
                    let scale = dy[0] * (T::ONE / T::from_f64(n_kept as f64));
                    let lv = self.nodes[logits.0].data.clone();
                    let targets = targets.clone();
                    let kept = kept.clone();
                    let mut dl = vec![T::ZERO; lv.len()];
                    for (row_idx, row) in lv.chunks_exact(v).enumerate() {
                        if !kept[row_idx] {
                            continue;
                        }
                        let dl_row = &mut dl[row_idx * v..(row_idx + 1) * v];
                        softmax_row(row, dl_row);
                        for p in dl_row.iter_mut() {
                            *p = *p * scale;
                        }
                        dl_row[targets[row_idx]] += -scale;
                    }
                    self.accumulate(logits, dl);
                }
            }
            Op::Gather { table, ids } => {
                let table = *table;
                if self.needs(table) {
                    let d = self.nodes[table.0].shape[1];
                    let ids = ids.clone();
                    self.accumulate_at(table, |g| {
                        for (t, &id) in ids.iter().enumerate() {
                            let src = &dy[t * d..(t + 1) * d];
                            let dst = &mut g[id * d..(id + 1) * d];
                            for (gd, &s) in dst.iter_mut().zip(src) {
                                *gd += s;
                            }
                        }
                    });
                }
            }
            Op::SliceCols { x, start, width } => {
                let (x, start, width) = (*x, *start, *width);
                if self.needs(x) {
                    let n = self.nodes[x.0].shape[1];
                    let m = self.nodes[x.0].shape[0];
                    self.accumulate_at(x, |g| {
                        for i in 0..m {
                            let src = &dy[i * width..(i + 1) * width];
                            let dst = &mut g[i * n + start..i * n + start + width];
                            for (gd, &s) in dst.iter_mut().zip(src) {
                                *gd += s;
                            }
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let m = self.nodes[idx].shape[0];
                let n = self.nodes[idx].shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].shape[1];
                    if self.needs(p) {
                        let mut dp = vec![T::ZERO; m * w];
                        for i in 0..m {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&dy[i * n + offset..i * n + offset + w]);
                        }
                        self.accumulate(p, dp);
                    }
                    offset += w;
                }
            }
            Op::Transpose(x) => {
                let x = *x;
                if self.needs(x) {
                    let m = self.nodes[x.0].shape[0];
                    let n = self.nodes[x.0].shape[1];
                    // dy is [n×m]; transpose back.
                    let mut dx = vec![T::ZERO; m * n];
                    for j in 0..n {
                        for i in 0..m {
                            dx[i * n + j] = dy[j * m + i];
                        }
                    }
                    self.accumulate(x, dx);
                }
            }
            Op::Scale(x, c) => {
                let (x, c) = (*x, *c);
                if self.needs(x) {
                    let dx: Vec<T> = dy.iter().map(|&g| g * c).collect();
                    self.accumulate(x, dx);
                }
            }
            Op::AddConst(x) => {
                let x = *x;
                if self.needs(x) {
                    self.accumulate(x, dy.to_vec());
                }
            }
            Op::Sum(x) => {
                let x = *x;
                if self.needs(x) {
                    let len = self.nodes[x.0].data.len();
                    self.accumulate(x, vec![dy[0]; len]);
                }
            }
        }
    }
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let mut m = row[0];
    for &v in row {
        m = m.max(v);
    }
    let mut sum = T::ZERO;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        sum += *o;
    }
    let inv = T::ONE / sum;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let mut m = row[0];
    for &v in row {
        m = m.max(v);
    }
    let mut sum = T::ZERO;
    for &v in row {
        sum += (v - m).exp();
    }
    m + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_grad;

    fn leaf_grad<T: Scalar>(tape: &mut Tape<T>, shape: Vec<usize>, data: Vec<T>) -> NodeId {
        tape.leaf_from(shape, data, true)
    }

    // Independent ijk-order matmul used as the oracle.
    fn matmul_oracle(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f32;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn rand_vec(seed: u64, n: usize) -> Vec<f32> {
        let mut s = crate::rng::Stream::new(seed);
        (0..n).map(|_| (s.next_f64() * 2.0 - 1.0) as f32).collect()
    }

    #[test]
    fn matmul_identity() {
        let m = rand_vec(1, 9);
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let mut tape = Tape::new();
        let a = tape.leaf_from(vec![3, 3], eye, false);
        let b = tape.leaf_from(vec![3, 3], m.clone(), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &m[..]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.leaf_from(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0], false);
        let b = tape.leaf_from(vec![2, 1], vec![0.0, 1.0], false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle_on_random_shapes() {
        let mut s = crate::rng::Stream::new(99);
        for case in 0..20 {
            let m = s.gen_range(1, 17);
            let k = s.gen_range(1, 17);
            let n = s.gen_range(1, 17);
            let a = rand_vec(100 + case, m * k);
            let b = rand_vec(200 + case, k * n);
            let mut tape = Tape::new();
            let na = tape.leaf_from(vec![m, k], a.clone(), false);
            let nb = tape.leaf_from(vec![k, n], b.clone(), false);
            let nc = tape.matmul(na, nb).unwrap();
            let expect = matmul_oracle(&a, &b, m, k, n);
            for (x, y) in tape.value(nc).iter().zip(&expect) {
                assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf_from(vec![2, 3], vec![0.0; 6], false);
        let b = tape.leaf_from(vec![2, 2], vec![0.0; 4], false);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![2], vec![0.0f64, 0.0], false);
        let y = tape.softmax_lastdim(x);
        assert_eq!(tape.value(y), &[0.5, 0.5]);

        let big = tape.leaf_from(vec![3], vec![1000.0f64, 1000.0, 1000.0], false);
        let yb = tape.softmax_lastdim(big);
        for &v in tape.value(yb) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let x3 = tape.leaf_from(vec![3], vec![1.0f64, 2.0, 3.0], false);
        let y3 = tape.softmax_lastdim(x3);
        let z: f64 = (1f64).exp() + (2f64).exp() + (3f64).exp();
        for (v, e) in tape.value(y3).iter().zip([1.0, 2.0, 3.0]) {
            assert!((v - e.exp() / z).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_stay_in_range() {
        for seed in 0..10 {
            let data = rand_vec(seed, 28);
            let mut tape = Tape::new();
            let x = tape.leaf_from(vec![4, 7], data, false);
            let y = tape.softmax_lastdim(x);
            for row in tape.value(y).chunks_exact(7) {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn layer_norm_constant_slice_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![1, 4], vec![5.0f64; 4], false);
        let g = tape.leaf_from(vec![4], vec![1.0; 4], false);
        let b = tape.leaf_from(vec![4], vec![0.0; 4], false);
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for &v in tape.value(y) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_centers_its_input() {
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![1, 3], vec![1.0f64, 2.0, 3.0], false);
        let g = tape.leaf_from(vec![3], vec![1.0; 3], false);
        let b = tape.leaf_from(vec![3], vec![0.0; 3], false);
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let mean: f64 = tape.value(y).iter().sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-7);
    }

    #[test]
    fn layer_norm_matches_scalar_loop_oracle() {
        let n = 6;
        let data: Vec<f64> = rand_vec(5, n).iter().map(|&v| v as f64).collect();
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![1, n], data.clone(), false);
        let g = tape.leaf_from(vec![n], vec![2.0; n], false);
        let b = tape.leaf_from(vec![n], vec![1.0; n], false);
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();

        // Scalar-loop oracle.
        let mean = data.iter().sum::<f64>() / n as f64;
        let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        for (j, &got) in tape.value(y).iter().enumerate() {
            let expect = 2.0 * ((data[j] - mean) / (var + 1e-5).sqrt()) + 1.0;
            assert!((got - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_extent_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf_from(vec![1, 4], vec![0.0; 4], false);
        let g = tape.leaf_from(vec![3], vec![1.0; 3], false);
        let b = tape.leaf_from(vec![3], vec![0.0; 3], false);
        assert!(tape.layer_norm(x, g, b, 1e-5).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut tape = Tape::new();
        let logits = tape.leaf_from(vec![2, 4], vec![0.3f64; 8], false);
        let loss = tape.cross_entropy(logits, &[1, 2], usize::MAX).unwrap();
        assert!((tape.scalar_value(loss) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_near_certain_target() {
        let mut tape = Tape::new();
        let mut row = vec![0.0f64; 5];
        row[3] = 20.0;
        let logits = tape.leaf_from(vec![1, 5], row, false);
        let loss = tape.cross_entropy(logits, &[3], usize::MAX).unwrap();
        assert!(tape.scalar_value(loss) < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_oracle() {
        let data: Vec<f64> = rand_vec(7, 15).iter().map(|&v| v as f64 * 3.0).collect();
        let targets = [4usize, 0, 2];
        let mut tape = Tape::new();
        let logits = tape.leaf_from(vec![3, 5], data.clone(), false);
        let loss = tape.cross_entropy(logits, &targets, usize::MAX).unwrap();

        // Direct log-sum-exp oracle without max subtraction.
        let mut expect = 0.0;
        for (row, &t) in data.chunks_exact(5).zip(&targets) {
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            expect += lse - row[t];
        }
        expect /= 3.0;
        assert!((tape.scalar_value(loss) - expect).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_is_nonnegative() {
        for seed in 0..10 {
            let data: Vec<f64> = rand_vec(seed, 12).iter().map(|&v| v as f64 * 5.0).collect();
            let mut tape = Tape::new();
            let logits = tape.leaf_from(vec![3, 4], data, false);
            let loss = tape.cross_entropy(logits, &[0, 3, 1], usize::MAX).unwrap();
            assert!(tape.scalar_value(loss) >= 0.0);
        }
    }

    #[test]
    fn cross_entropy_error_paths() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf_from(vec![2, 3], vec![0.0; 6], false);
        assert!(matches!(
            tape.cross_entropy(logits, &[0, 9], usize::MAX),
            Err(Error::IndexOutOfRange { .. })
        ));
        let logits2 = tape.leaf_from(vec![2, 3], vec![0.0; 6], false);
        assert!(matches!(
            tape.cross_entropy(logits2, &[7, 7], 7),
            Err(Error::UndefinedLoss)
        ));
    }

    #[test]
    fn relu_and_additive_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![3], vec![-1.0f32, 0.0, 2.0], false);
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);

        let v = rand_vec(3, 4);
        let a = tape.leaf_from(vec![4], v.clone(), false);
        let z = tape.leaf_from(vec![4], vec![0.0; 4], false);
        let s = tape.add(a, z).unwrap();
        assert_eq!(tape.value(s), &v[..]);
    }

    #[test]
    fn gelu_matches_erf_formula_pointwise() {
        let xs = [-2.5f64, -1.0, -0.1, 0.0, 0.3, 1.7, 4.0];
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![xs.len()], xs.to_vec(), false);
        let y = tape.gelu(x);
        for (&got, &v) in tape.value(y).iter().zip(&xs) {
            let expect = 0.5 * v * (1.0 + libm::erf(v / 2f64.sqrt()));
            assert!((got - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn embedding_gather_rejects_out_of_range() {
        let mut tape = Tape::<f32>::new();
        let table = tape.leaf_from(vec![4, 2], vec![0.0; 8], false);
        assert!(matches!(
            tape.embedding_gather(table, &[0, 4]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = leaf_grad(&mut tape, vec![3], vec![1.0f64, 2.0, 3.0]);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_quadratic() {
        let mut tape = Tape::new();
        let x = leaf_grad(&mut tape, vec![3], vec![1.0f64, 2.0, 3.0]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = leaf_grad(&mut tape, vec![2], vec![1.0f64, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn reuse_accumulates_exactly_the_sum_of_single_use_grads() {
        // loss = sum(x·a) + sum(x·b): grad must be a+b exactly at 64-bit.
        let a = [0.25f64, -1.5, 3.0];
        let b = [2.0f64, 0.125, -0.75];
        let x0 = [1.0f64, 2.0, 3.0];

        let single = |w: &[f64]| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = leaf_grad(&mut tape, vec![3], x0.to_vec());
            let wn = tape.leaf_from(vec![3], w.to_vec(), false);
            let p = tape.mul(x, wn).unwrap();
            let loss = tape.sum(p);
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let ga = single(&a);
        let gb = single(&b);

        let mut tape = Tape::new();
        let x = leaf_grad(&mut tape, vec![3], x0.to_vec());
        let an = tape.leaf_from(vec![3], a.to_vec(), false);
        let bn = tape.leaf_from(vec![3], b.to_vec(), false);
        let pa = tape.mul(x, an).unwrap();
        let pb = tape.mul(x, bn).unwrap();
        let sa = tape.sum(pa);
        let sb = tape.sum(pb);
        let loss = tape.add(sa, sb).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        for j in 0..3 {
            assert_eq!(g[j], ga[j] + gb[j]);
        }
    }

    /// Gradient check: tape backward vs central finite differences, for
    /// every differentiable op, on random small inputs at 64-bit.
    #[test]
    fn every_op_matches_finite_differences() {
        type Build = dyn Fn(&mut Tape<f64>, NodeId) -> NodeId + Sync;
        let check = |name: &str, build: &Build, dims: usize| {
            for seed in 0..20u64 {
                let mut s = crate::rng::Stream::new(seed * 31 + 7);
                let data: Vec<f64> = (0..dims).map(|_| s.next_f64() * 2.0 - 1.0).collect();
                let x = Tensor::new(vec![2, dims / 2], data).unwrap().with_grad();

                let mut tape = Tape::new();
                let xn = tape.leaf(&x);
                let out = build(&mut tape, xn);
                let loss = tape.sum(out);
                tape.backward(loss).unwrap();
                let analytic = tape.grad(xn).unwrap().to_vec();

                let numeric = finite_diff_grad(
                    |t: &Tensor<f64>| {
                        let mut tp = Tape::new();
                        let n = tp.leaf(t);
                        let o = build(&mut tp, n);
                        let l = tp.sum(o);
                        Ok(tp.scalar_value(l))
                    },
                    &x,
                    1e-5,
                )
                .unwrap();

                for (j, (&a, &n)) in analytic.iter().zip(numeric.data()).enumerate() {
                    let err = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
                    assert!(err <= 1e-4, "{name} grad[{j}]: {a} vs {n} (rel {err})");
                }
            }
        };

        check("relu", &|t, x| t.relu(x), 8);
        check("gelu", &|t, x| t.gelu(x), 8);
        check("softmax", &|t, x| t.softmax_lastdim(x), 8);
        check("scale", &|t, x| t.scale(x, 0.37), 8);
        check("transpose", &|t, x| t.transpose(x).unwrap(), 8);
        check("mul_self", &|t, x| t.mul(x, x).unwrap(), 8);
        check(
            "matmul",
            &|t, x| {
                let w = t.leaf_from(vec![4, 3], (0..12).map(|i| 0.1 * i as f64).collect(), false);
                t.matmul(x, w).unwrap()
            },
            8,
        );
        check(
            "add_bias",
            &|t, x| {
                let b = t.leaf_from(vec![4], vec![0.5, -0.25, 1.0, 0.0], false);
                t.add_bias(x, b).unwrap()
            },
            8,
        );
        check(
            "layer_norm",
            &|t, x| {
                let g = t.leaf_from(vec![4], vec![1.5, 0.5, 2.0, 1.0], false);
                let b = t.leaf_from(vec![4], vec![0.1, -0.1, 0.0, 0.3], false);
                t.layer_norm(x, g, b, 1e-5).unwrap()
            },
            8,
        );
        check(
            "slice_concat",
            &|t, x| {
                let left = t.slice_cols(x, 0, 2).unwrap();
                let right = t.slice_cols(x, 2, 2).unwrap();
                t.concat_cols(&[right, left]).unwrap()
            },
            8,
        );
        check(
            "cross_entropy",
            &|t, x| t.cross_entropy(x, &[1, 3], usize::MAX).unwrap(),
            8,
        );
        check(
            "gather",
            &|t, x| t.embedding_gather(x, &[1, 0, 1]).unwrap(),
            8,
        );
    }
}

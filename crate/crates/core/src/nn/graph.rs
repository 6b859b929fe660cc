//! Tape-based reverse-mode autodiff over dense `f64` tensors.
//!
//! Nodes are appended in evaluation order, so every operand of node `i`
//! lives at an index `< i` and the backward pass is a single reverse sweep.
//! Sequence tensors are stored flattened as `[batch * len, dim]` and carry
//! a [`SeqLayout`] describing per-sequence valid lengths.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::tensor::{ParamStore, Tensor};
use crate::searchspace::PoolingKind;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch of right-padded sequences flattened to `batch * len` rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub batch: usize,
    pub len: usize,
    /// Valid (non-PAD) prefix length of each sequence, each in `1..=len`.
    pub lengths: Vec<usize>,
}

impl SeqLayout {
    pub fn new(batch: usize, len: usize, lengths: Vec<usize>) -> Result<Self> {
        if lengths.len() != batch {
            return Err(Error::shape(
                "layout",
                format!("{} lengths for batch {batch}", lengths.len()),
            ));
        }
        if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > len) {
            return Err(Error::precondition(
                "layout",
                format!("sequence length {bad} outside 1..={len}"),
            ));
        }
        Ok(Self {
            batch,
            len,
            lengths,
        })
    }

    /// All sequences fully valid.
    pub fn dense(batch: usize, len: usize) -> Self {
        Self {
            batch,
            len,
            lengths: vec![len; batch],
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.len
    }

    pub fn row_mask(&self) -> Vec<bool> {
        let mut keep = Vec::with_capacity(self.rows());
        for &l in &self.lengths {
            keep.extend((0..self.len).map(|t| t < l));
        }
        keep
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    MaskRows {
        x: Var,
        keep: Vec<bool>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        layout: Arc<SeqLayout>,
        width: usize,
        cols: Vec<f64>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        layout: Arc<SeqLayout>,
        probs: Vec<f64>,
    },
    Pool {
        x: Var,
        kind: PoolingKind,
        layout: Arc<SeqLayout>,
        /// For max pooling: source row of each output element.
        argmax: Vec<usize>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// A recorded computation. Single-threaded; build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// `c = a·b + beta·c` for strided row/column-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_row_stride: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= span(m, k, a_strides));
    assert!(b.len() >= span(k, n, b_strides));
    assert!(c.len() >= span(m, n, (c_row_stride, 1)));
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_row_stride as isize,
            1,
        );
    }
}

fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(op, format!("expected a matrix, got {shape:?}"))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf whose gradient flag follows the tensor's `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    /// Leaf that always requires a gradient.
    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let mut t = Tensor::new(shape, data)?;
        t.set_requires_grad(true);
        Ok(self.leaf(&t))
    }

    /// Binds every parameter of `store` as a leaf, in registration order.
    pub fn bind(&mut self, store: &ParamStore) -> Vec<Var> {
        store.tensors().iter().map(|t| self.leaf(t)).collect()
    }

    /// Accumulates gradients of bound leaves back into `store`.
    pub fn collect_grads(&self, bound: &[Var], store: &mut ParamStore) {
        for (v, t) in bound.iter().zip(store.tensors_mut()) {
            if !t.requires_grad() {
                continue;
            }
            if let Some(g) = &self.node(*v).grad {
                t.accumulate_grad(g);
            }
        }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = dims2(self.shape(a), "matmul")?;
        let (k2, m) = dims2(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            self.value(a),
            (k, 1),
            self.value(b),
            (m, 1),
            0.0,
            &mut out,
            m,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![n, m], out, rg, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, rg, Op::Add(a, b)))
    }

    /// Broadcast-adds a `[m]` vector to every row of an `[n, m]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, m) = dims2(self.shape(a), "add_row")?;
        if self.shape(bias) != [m] {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", self.shape(a), self.shape(bias)),
            ));
        }
        let b = self.value(bias);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(m) {
            row.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(vec![n, m], out, rg, Op::AddRow(a, bias)))
    }

    /// `x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, rg, Op::Relu(x))
    }

    /// Normalizes the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, d) = dims2(self.shape(x), "layer_norm")?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            vec![n, d],
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Row lookup into a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2(self.shape(table), "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::precondition(
                "embedding",
                format!("id {bad} outside vocabulary of {v}"),
            ));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = dims2(self.shape(x), "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::precondition(
                "gather_rows",
                format!("row {bad} outside {n} rows"),
            ));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&xv[r * d..(r + 1) * d]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![rows.len(), d],
            out,
            rg,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Zeroes every row whose `keep` flag is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (n, d) = dims2(self.shape(x), "mask_rows")?;
        if keep.len() != n {
            return Err(Error::shape(
                "mask_rows",
                format!("{} flags for {n} rows", keep.len()),
            ));
        }
        let mut out = self.value(x).to_vec();
        for (row, &k) in out.chunks_exact_mut(d).zip(keep) {
            if !k {
                row.fill(0.0);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![n, d],
            out,
            rg,
            Op::MaskRows {
                x,
                keep: keep.to_vec(),
            },
        ))
    }

    /// Same-length 1-D convolution along each sequence. `kernel` is
    /// `[c_out, c_in, width]` with odd `width`; positions outside the
    /// sequence read as zero.
    pub fn conv1d_same(&mut self, x: Var, kernel: Var, layout: &Arc<SeqLayout>) -> Result<Var> {
        let (rows, c_in) = dims2(self.shape(x), "conv1d_same")?;
        let (c_out, kc_in, width) = match *self.shape(kernel) {
            [o, i, w] => (o, i, w),
            ref s => {
                return Err(Error::shape(
                    "conv1d_same",
                    format!("kernel must be [c_out, c_in, width], got {s:?}"),
                ))
            }
        };
        if width % 2 == 0 {
            return Err(Error::precondition(
                "conv1d_same",
                format!("kernel width {width} is even"),
            ));
        }
        if kc_in != c_in || rows != layout.rows() {
            return Err(Error::shape(
                "conv1d_same",
                format!(
                    "x {:?}, kernel {:?}, layout {}x{}",
                    self.shape(x),
                    self.shape(kernel),
                    layout.batch,
                    layout.len
                ),
            ));
        }
        let half = width / 2;
        let ck = c_in * width;
        let xv = self.value(x);
        let mut cols = vec![0.0; rows * ck];
        for b in 0..layout.batch {
            for t in 0..layout.len {
                let dst = &mut cols[(b * layout.len + t) * ck..][..ck];
                for j in 0..width {
                    let src_t = t + j;
                    if src_t < half || src_t - half >= layout.len {
                        continue;
                    }
                    let src = &xv[(b * layout.len + src_t - half) * c_in..][..c_in];
                    for (c, &v) in src.iter().enumerate() {
                        dst[c * width + j] = v;
                    }
                }
            }
        }
        let mut out = vec![0.0; rows * c_out];
        gemm(
            rows,
            ck,
            c_out,
            &cols,
            (ck, 1),
            self.value(kernel),
            (1, ck),
            0.0,
            &mut out,
            c_out,
        );
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(
            vec![rows, c_out],
            out,
            rg,
            Op::Conv1d {
                x,
                kernel,
                layout: Arc::clone(layout),
                width,
                cols,
            },
        ))
    }

    /// Scaled dot-product attention over a fused `[rows, 3·dim]` projection
    /// laid out as `[q | k | v]`. Keys past each sequence's valid length are
    /// masked out. Returns the concatenated per-head contexts `[rows, dim]`.
    pub fn attention(&mut self, qkv: Var, heads: usize, layout: &Arc<SeqLayout>) -> Result<Var> {
        let (rows, three_d) = dims2(self.shape(qkv), "attention")?;
        if three_d % 3 != 0 || rows != layout.rows() {
            return Err(Error::shape(
                "attention",
                format!(
                    "qkv {:?} with layout {}x{}",
                    self.shape(qkv),
                    layout.batch,
                    layout.len
                ),
            ));
        }
        let d = three_d / 3;
        if heads == 0 || d % heads != 0 {
            return Err(Error::precondition(
                "attention",
                format!("{heads} heads do not divide dimension {d}"),
            ));
        }
        let dh = d / heads;
        let t_len = layout.len;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(qkv);
        let mut probs = vec![0.0; layout.batch * heads * t_len * t_len];
        let mut out = vec![0.0; rows * d];
        for b in 0..layout.batch {
            let valid = layout.lengths[b];
            let base = b * t_len * three_d;
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * t_len * t_len..][..t_len * t_len];
                let (q, k, v) = (base + h * dh, base + d + h * dh, base + 2 * d + h * dh);
                // scores = Q·Kᵀ over valid keys only
                gemm(t_len, dh, valid, &qv[q..], (three_d, 1), &qv[k..], (1, three_d), 0.0, p, t_len);
                for prow in p.chunks_exact_mut(t_len) {
                    let row = &mut prow[..valid];
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
                    let mut z = 0.0;
                    for ps in row.iter_mut() {
                        *ps = (*ps * scale - max).exp();
                        z += *ps;
                    }
                    row.iter_mut().for_each(|ps| *ps /= z);
                }
                gemm(t_len, valid, dh, p, (t_len, 1), &qv[v..], (three_d, 1), 0.0, &mut out[b * t_len * d + h * dh..], d);
            }
        }
        let rg = self.rg(&[qkv]);
        Ok(self.push(
            vec![rows, d],
            out,
            rg,
            Op::Attention {
                qkv,
                heads,
                layout: Arc::clone(layout),
                probs,
            },
        ))
    }

    /// Reduces each sequence to one row over its valid prefix. Max-pool ties
    /// go to the lowest position.
    pub fn pool(&mut self, x: Var, kind: PoolingKind, layout: &Arc<SeqLayout>) -> Result<Var> {
        let (rows, d) = dims2(self.shape(x), "pool")?;
        if layout.len == 0 || layout.batch == 0 {
            return Err(Error::precondition("pool", "empty sequence"));
        }
        if rows != layout.rows() {
            return Err(Error::shape(
                "pool",
                format!("{rows} rows for layout {}x{}", layout.batch, layout.len),
            ));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; layout.batch * d];
        let mut argmax = Vec::new();
        for b in 0..layout.batch {
            let base = b * layout.len;
            let o = &mut out[b * d..(b + 1) * d];
            match kind {
                PoolingKind::Cls => o.copy_from_slice(&xv[base * d..(base + 1) * d]),
                PoolingKind::Mean => {
                    let n = layout.lengths[b];
                    for t in 0..n {
                        let row = &xv[(base + t) * d..][..d];
                        o.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    o.iter_mut().for_each(|a| *a /= n as f64);
                }
                PoolingKind::Max => {
                    for j in 0..d {
                        let mut best = base;
                        for t in 1..layout.lengths[b] {
                            if xv[(base + t) * d + j] > xv[best * d + j] {
                                best = base + t;
                            }
                        }
                        o[j] = xv[best * d + j];
                        argmax.push(best);
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![layout.batch, d],
            out,
            rg,
            Op::Pool {
                x,
                kind,
                layout: Arc::clone(layout),
                argmax,
            },
        ))
    }

    /// Mean softmax cross-entropy over the rows of `[n, classes]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = dims2(self.shape(logits), "softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::precondition(
                "softmax_cross_entropy",
                format!("label {bad} outside {c} classes"),
            ));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - log_z).exp();
            }
            loss += log_z - row[labels[r]];
        }
        loss /= n as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// `Σ x_i · w_i` as a scalar. Used to reduce tensors for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {:?}", weights.len(), self.shape(x)),
            ));
        }
        let s = self
            .value(x)
            .iter()
            .zip(weights)
            .map(|(a, b)| a * b)
            .sum();
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![1],
            vec![s],
            rg,
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar node. Gradients accumulate into every
    /// node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss).iter().product::<usize>() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        {
            let n = &mut self.nodes[loss.0];
            let g = n.grad.get_or_insert_with(|| vec![0.0]);
            g[0] += 1.0;
        }
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = node.grad.as_deref() else {
                continue;
            };
            backprop(before, node, grad);
        }
        Ok(())
    }
}

/// Gradient buffer of `v` if it participates in differentiation.
fn grad_of(nodes: &mut [Node], v: Var) -> Option<&mut [f64]> {
    let n = &mut nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    let len = n.value.len();
    Some(n.grad.get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
}

fn backprop(nodes: &mut [Node], node: &Node, dy: &[f64]) {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (n, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let m = nodes[b.0].shape[1];
            if nodes[a.0].requires_grad {
                let bv = nodes[b.0].value.clone();
                let da = grad_of(nodes, *a).unwrap();
                gemm(n, m, k, dy, (m, 1), &bv, (1, m), 1.0, da, k);
            }
            if nodes[b.0].requires_grad {
                let av = nodes[a.0].value.clone();
                let db = grad_of(nodes, *b).unwrap();
                gemm(k, n, m, &av, (1, k), dy, (m, 1), 1.0, db, m);
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(g) = grad_of(nodes, *v) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
            }
        }
        Op::AddRow(a, bias) => {
            if let Some(g) = grad_of(nodes, *a) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
            }
            if let Some(g) = grad_of(nodes, *bias) {
                let m = g.len();
                for row in dy.chunks_exact(m) {
                    g.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                }
            }
        }
        Op::Relu(x) => {
            let y = &node.value;
            if let Some(g) = grad_of(nodes, *x) {
                for ((g, d), y) in g.iter_mut().zip(dy).zip(y) {
                    if *y > 0.0 {
                        *g += d;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let d = nodes[gain.0].value.len();
            let gv = nodes[gain.0].value.clone();
            if let Some(gg) = grad_of(nodes, *gain) {
                for (dyr, hr) in dy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        gg[j] += dyr[j] * hr[j];
                    }
                }
            }
            if let Some(gb) = grad_of(nodes, *bias) {
                for dyr in dy.chunks_exact(d) {
                    gb.iter_mut().zip(dyr).for_each(|(g, v)| *g += v);
                }
            }
            if let Some(gx) = grad_of(nodes, *x) {
                let mut dxhat = vec![0.0; d];
                for (r, (dyr, hr)) in dy.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                    let mut sum = 0.0;
                    let mut dot = 0.0;
                    for j in 0..d {
                        dxhat[j] = dyr[j] * gv[j];
                        sum += dxhat[j];
                        dot += dxhat[j] * hr[j];
                    }
                    let scale = inv_std[r] / d as f64;
                    let gr = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        gr[j] += scale * (d as f64 * dxhat[j] - sum - hr[j] * dot);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            if let Some(g) = grad_of(nodes, *table) {
                let d = node.shape[1];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut g[id * d..(id + 1) * d];
                    dst.iter_mut()
                        .zip(&dy[r * d..(r + 1) * d])
                        .for_each(|(g, v)| *g += v);
                }
            }
        }
        Op::GatherRows { x, rows } => {
            if let Some(g) = grad_of(nodes, *x) {
                let d = node.shape[1];
                for (i, &r) in rows.iter().enumerate() {
                    let dst = &mut g[r * d..(r + 1) * d];
                    dst.iter_mut()
                        .zip(&dy[i * d..(i + 1) * d])
                        .for_each(|(g, v)| *g += v);
                }
            }
        }
        Op::MaskRows { x, keep } => {
            if let Some(g) = grad_of(nodes, *x) {
                let d = node.shape[1];
                for ((gr, dr), &k) in g.chunks_exact_mut(d).zip(dy.chunks_exact(d)).zip(keep) {
                    if k {
                        gr.iter_mut().zip(dr).for_each(|(g, v)| *g += v);
                    }
                }
            }
        }
        Op::Conv1d {
            x,
            kernel,
            layout,
            width,
            cols,
        } => {
            let rows = layout.rows();
            let c_out = node.shape[1];
            let c_in = nodes[x.0].shape[1];
            let ck = c_in * width;
            if let Some(gk) = grad_of(nodes, *kernel) {
                gemm(c_out, rows, ck, dy, (1, c_out), cols, (ck, 1), 1.0, gk, ck);
            }
            if nodes[x.0].requires_grad {
                let kv = nodes[kernel.0].value.clone();
                let mut dcols = vec![0.0; rows * ck];
                gemm(rows, c_out, ck, dy, (c_out, 1), &kv, (ck, 1), 0.0, &mut dcols, ck);
                let gx = grad_of(nodes, *x).unwrap();
                let half = width / 2;
                for b in 0..layout.batch {
                    for t in 0..layout.len {
                        let src = &dcols[(b * layout.len + t) * ck..][..ck];
                        for j in 0..*width {
                            let st = t + j;
                            if st < half || st - half >= layout.len {
                                continue;
                            }
                            let dst = &mut gx[(b * layout.len + st - half) * c_in..][..c_in];
                            for (c, g) in dst.iter_mut().enumerate() {
                                *g += src[c * width + j];
                            }
                        }
                    }
                }
            }
        }
        Op::Attention {
            qkv,
            heads,
            layout,
            probs,
        } => {
            let qv = nodes[qkv.0].value.clone();
            let Some(g) = grad_of(nodes, *qkv) else {
                return;
            };
            let three_d = qv.len() / layout.rows();
            let d = three_d / 3;
            let dh = d / heads;
            let t_len = layout.len;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut ds = vec![0.0; t_len * t_len];
            for b in 0..layout.batch {
                let valid = layout.lengths[b];
                let base = b * t_len * three_d;
                for h in 0..*heads {
                    let p = &probs[(b * heads + h) * t_len * t_len..][..t_len * t_len];
                    let (q, k, v) = (base + h * dh, base + d + h * dh, base + 2 * d + h * dh);
                    let dout = &dy[b * t_len * d + h * dh..];
                    // dP = dO·Vᵀ, dV += Pᵀ·dO
                    gemm(t_len, dh, valid, dout, (d, 1), &qv[v..], (1, three_d), 0.0, &mut ds, t_len);
                    gemm(valid, t_len, dh, p, (1, t_len), dout, (d, 1), 1.0, &mut g[v..], three_d);
                    for (dsr, pr) in ds.chunks_exact_mut(t_len).zip(p.chunks_exact(t_len)) {
                        let dot: f64 = dsr[..valid].iter().zip(pr).map(|(a, b)| a * b).sum();
                        for (x, &pv) in dsr[..valid].iter_mut().zip(pr) {
                            *x = pv * (*x - dot) * scale;
                        }
                    }
                    // dQ += dS·K, dK += dSᵀ·Q
                    gemm(t_len, valid, dh, &ds, (t_len, 1), &qv[k..], (three_d, 1), 1.0, &mut g[q..], three_d);
                    gemm(valid, t_len, dh, &ds, (1, t_len), &qv[q..], (three_d, 1), 1.0, &mut g[k..], three_d);
                }
            }
        }
        Op::Pool {
            x,
            kind,
            layout,
            argmax,
        } => {
            let d = node.shape[1];
            let Some(g) = grad_of(nodes, *x) else {
                return;
            };
            for b in 0..layout.batch {
                let base = b * layout.len;
                let dyr = &dy[b * d..(b + 1) * d];
                match kind {
                    PoolingKind::Cls => {
                        g[base * d..(base + 1) * d]
                            .iter_mut()
                            .zip(dyr)
                            .for_each(|(g, v)| *g += v);
                    }
                    PoolingKind::Mean => {
                        let n = layout.lengths[b] as f64;
                        for t in 0..layout.lengths[b] {
                            g[(base + t) * d..(base + t + 1) * d]
                                .iter_mut()
                                .zip(dyr)
                                .for_each(|(g, v)| *g += v / n);
                        }
                    }
                    PoolingKind::Max => {
                        for j in 0..d {
                            g[argmax[b * d + j] * d + j] += dyr[j];
                        }
                    }
                }
            }
        }
        Op::SoftmaxCe {
            logits,
            labels,
            probs,
        } => {
            if let Some(g) = grad_of(nodes, *logits) {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = dy[0] / n as f64;
                for r in 0..n {
                    for j in 0..c {
                        let target = if labels[r] == j { 1.0 } else { 0.0 };
                        g[r * c + j] += scale * (probs[r * c + j] - target);
                    }
                }
            }
        }
        Op::WeightedSum { x, weights } => {
            if let Some(g) = grad_of(nodes, *x) {
                g.iter_mut()
                    .zip(weights)
                    .for_each(|(g, w)| *g += dy[0] * w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.constant(vec![2], vec![-1.0, 2.0]).unwrap();
        let y = g.relu(x);
        assert_eq!(g.value(y), &[0.0, 2.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln2() {
        let mut g = Graph::new();
        let x = g.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let l = g.softmax_cross_entropy(x, &[0]).unwrap();
        assert!((g.value(l)[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut g = Graph::new();
        let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn conv_boundary_sums() {
        let mut g = Graph::new();
        let x = g.constant(vec![4, 1], vec![1.0; 4]).unwrap();
        let k = g.constant(vec![1, 1, 3], vec![1.0; 3]).unwrap();
        let layout = Arc::new(SeqLayout::dense(1, 4));
        let y = g.conv1d_same(x, k, &layout).unwrap();
        assert_eq!(g.value(y), &[2.0, 3.0, 3.0, 2.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let data = vec![0.3, -1.0, 2.5, 4.0, 0.0];
        let x = g.constant(vec![5, 1], data.clone()).unwrap();
        let k = g.constant(vec![1, 1, 5], vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let layout = Arc::new(SeqLayout::dense(1, 5));
        let y = g.conv1d_same(x, k, &layout).unwrap();
        approx(g.value(y), &data);
    }

    #[test]
    fn conv_rejects_even_width() {
        let mut g = Graph::new();
        let x = g.constant(vec![4, 1], vec![1.0; 4]).unwrap();
        let k = g.constant(vec![1, 1, 2], vec![1.0; 2]).unwrap();
        let layout = Arc::new(SeqLayout::dense(1, 4));
        assert!(matches!(
            g.conv1d_same(x, k, &layout),
            Err(Error::Precondition { .. })
        ));
    }

    #[test]
    fn pooling_kinds() {
        let layout = Arc::new(SeqLayout::dense(1, 2));
        for (kind, want) in [
            (PoolingKind::Mean, [2.0, 4.0]),
            (PoolingKind::Max, [3.0, 5.0]),
            (PoolingKind::Cls, [1.0, 3.0]),
        ] {
            let mut g = Graph::new();
            let x = g.constant(vec![2, 2], vec![1.0, 3.0, 3.0, 5.0]).unwrap();
            let y = g.pool(x, kind, &layout).unwrap();
            assert_eq!(g.value(y), &want);
        }
    }

    #[test]
    fn max_pool_ties_route_to_lowest_index() {
        let layout = Arc::new(SeqLayout::dense(1, 3));
        let mut g = Graph::new();
        let x = g.variable(vec![3, 1], vec![2.0, 2.0, 1.0]).unwrap();
        let y = g.pool(x, PoolingKind::Max, &layout).unwrap();
        let l = g.weighted_sum(y, &[1.0]).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn masked_pooling_ignores_padding() {
        let layout = Arc::new(SeqLayout::new(1, 3, vec![2]).unwrap());
        let mut g = Graph::new();
        let x = g.constant(vec![3, 1], vec![1.0, 3.0, 100.0]).unwrap();
        let m = g.pool(x, PoolingKind::Mean, &layout).unwrap();
        let mx = g.pool(x, PoolingKind::Max, &layout).unwrap();
        assert_eq!(g.value(m), &[2.0]);
        assert_eq!(g.value(mx), &[3.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let layout = Arc::new(SeqLayout::dense(1, 3));
        let mut g = Graph::new();
        let qkv = g
            .constant(vec![3, 3], vec![0.5, -1.0, 2.0, 1.5, 0.3, -0.2, -0.7, 0.9, 1.1])
            .unwrap();
        g.attention(qkv, 1, &layout).unwrap();
        if let Op::Attention { probs, .. } = &g.nodes.last().unwrap().op {
            for row in probs.chunks(3) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        } else {
            unreachable!();
        }
    }

    #[test]
    fn frozen_leaves_receive_no_grad() {
        let mut g = Graph::new();
        let w = g.constant(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let x = g.variable(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let y = g.matmul(x, w).unwrap();
        let l = g.weighted_sum(y, &[1.0]).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
    }
}

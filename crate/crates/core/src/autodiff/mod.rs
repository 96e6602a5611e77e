//! Minimal reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Graph`] is a tape of nodes; every operation appends a node holding its
//! forward value and enough information to push gradients back to its inputs.
//! Shapes are `(rows, cols)` in row-major layout, double precision
//! throughout. There is no broadcasting beyond row-vector bias addition.
//!
//! [`Graph::detach`] copies a value out of the gradient graph; it is the one
//! primitive behind every frozen quantity consumed by the losses.

pub mod optim;
pub mod params;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar node, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("expectile tau must lie in (0, 1), got {0}")]
    BadTau(f64),
    #[error("masked softmax row {0} has no unmasked position")]
    FullyMaskedRow(usize),
    #[error("masked mean over an empty mask")]
    EmptyMask,
    #[error("row index {index} out of bounds for {rows} rows")]
    RowOutOfBounds { index: usize, rows: usize },
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    // The additive constant is baked into the forward value; only the
    // multiplier matters for gradients.
    Affine { x: NodeId, mul: f64 },
    AddRow { x: NodeId, row: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    MaskedSoftmax { x: NodeId, keep: Vec<bool> },
    Gelu(NodeId),
    Sigmoid(NodeId),
    SliceCols { x: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    GatherRows { x: NodeId, index: Vec<usize> },
    MaskedMean { x: NodeId, keep: Vec<bool> },
    Expectile { pred: NodeId, target: NodeId, tau: f64, keep: Vec<bool> },
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Computation tape. Single-owner during forward/backward; independent graphs
/// may run concurrently.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(data.len(), rows * cols);
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node {
            rows,
            cols,
            data,
            grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> NodeId {
        assert_eq!(data.len(), rows * cols, "leaf data length must match shape");
        self.push(rows, cols, data, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.push(1, 1, vec![value], Op::Leaf)
    }

    /// Copies the current value of `x` into a fresh leaf, severing it from
    /// the gradient graph.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x.0].data.clone();
        let (rows, cols) = self.shape(x);
        self.push(rows, cols, data, Op::Leaf)
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].data[0]
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                detail: format!("{m}x{k} @ {k2}x{n}"),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            m,
            k,
            n,
            &mut out,
        );
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(c, r, out, Op::Transpose(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn zip(
        &mut self,
        opname: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, DiffError> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if (ra, ca) != (rb, cb) {
            return Err(DiffError::ShapeMismatch {
                op: opname,
                detail: format!("{ra}x{ca} vs {rb}x{cb}"),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(ra, ca, data, op))
    }

    /// `mul * x + add`, elementwise with scalar coefficients.
    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let (r, c) = self.shape(x);
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| mul * v + add).collect();
        self.push(r, c, data, Op::Affine { x, mul })
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.affine(x, factor, 0.0)
    }

    /// Adds a `1 x cols` row vector to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId, DiffError> {
        let (r, c) = self.shape(x);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != c {
            return Err(DiffError::ShapeMismatch {
                op: "add_row",
                detail: format!("{r}x{c} + {rr}x{rc}"),
            });
        }
        let rowdata = self.nodes[row.0].data.clone();
        let mut data = self.nodes[x.0].data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += rowdata[j];
            }
        }
        Ok(self.push(r, c, data, Op::AddRow { x, row }))
    }

    /// Per-row layer normalization with learned gain/bias row vectors.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, DiffError> {
        let (r, c) = self.shape(x);
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let (gr, gc) = self.shape(id);
            if gr != 1 || gc != c {
                return Err(DiffError::ShapeMismatch {
                    op: "layer_norm",
                    detail: format!("{name} is {gr}x{gc}, expected 1x{c}"),
                });
            }
        }
        let gdata = self.nodes[gain.0].data.clone();
        let bdata = self.nodes[bias.0].data.clone();
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let rowv = &src[i * c..(i + 1) * c];
            let mean = rowv.iter().sum::<f64>() / c as f64;
            let var = rowv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..c {
                out[i * c + j] = (rowv[j] - mean) * inv * gdata[j] + bdata[j];
            }
        }
        Ok(self.push(r, c, out, Op::LayerNorm { x, gain, bias }))
    }

    /// Row-wise softmax; positions with `keep == false` get exactly zero
    /// weight and receive exactly zero gradient. Every row must keep at
    /// least one position.
    pub fn masked_softmax(&mut self, x: NodeId, keep: &[bool]) -> Result<NodeId, DiffError> {
        let (r, c) = self.shape(x);
        if keep.len() != r * c {
            return Err(DiffError::ShapeMismatch {
                op: "masked_softmax",
                detail: format!("mask length {} for {r}x{c}", keep.len()),
            });
        }
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let krow = &keep[i * c..(i + 1) * c];
            if !krow.iter().any(|&k| k) {
                return Err(DiffError::FullyMaskedRow(i));
            }
            let mut max = f64::NEG_INFINITY;
            for j in 0..c {
                if krow[j] && row[j] > max {
                    max = row[j];
                }
            }
            // All kept logits NaN/-inf: let the NaN propagate to the output
            // rather than misreport a masking error.
            if max == f64::NEG_INFINITY {
                max = 0.0;
            }
            let mut total = 0.0;
            for j in 0..c {
                if krow[j] {
                    let e = (row[j] - max).exp();
                    out[i * c + j] = e;
                    total += e;
                }
            }
            for j in 0..c {
                out[i * c + j] /= total;
            }
        }
        Ok(self.push(
            r,
            c,
            out,
            Op::MaskedSoftmax {
                x,
                keep: keep.to_vec(),
            },
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| gelu_fwd(v)).collect();
        self.push(r, c, data, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| sigmoid_fwd(v)).collect();
        self.push(r, c, data, Op::Sigmoid(x))
    }

    /// Columns `start..start+len` of `x`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, DiffError> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return Err(DiffError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("cols {start}..{} of {r}x{c}", start + len),
            });
        }
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; r * len];
        for i in 0..r {
            out[i * len..(i + 1) * len].copy_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(self.push(r, len, out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        let (r, _) = self.shape(parts[0]);
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts {r} vs {pr}"),
                });
            }
            total += pc;
        }
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for &p in parts {
            let (_, pc) = self.shape(p);
            let src = &self.nodes[p.0].data;
            for i in 0..r {
                out[i * total + offset..i * total + offset + pc]
                    .copy_from_slice(&src[i * pc..(i + 1) * pc]);
            }
            offset += pc;
        }
        Ok(self.push(
            r,
            total,
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        let (_, c) = self.shape(parts[0]);
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != c {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("col counts {c} vs {pc}"),
                });
            }
            total += pr;
        }
        let mut out = Vec::with_capacity(total * c);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].data);
        }
        Ok(self.push(
            total,
            c,
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Row lookup: `out[i] = x[index[i]]`. Duplicate indices are allowed;
    /// gradients scatter-add back. This is also the embedding lookup.
    pub fn gather_rows(&mut self, x: NodeId, index: &[usize]) -> Result<NodeId, DiffError> {
        let (r, c) = self.shape(x);
        for &i in index {
            if i >= r {
                return Err(DiffError::RowOutOfBounds { index: i, rows: r });
            }
        }
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; index.len() * c];
        for (pos, &i) in index.iter().enumerate() {
            out[pos * c..(pos + 1) * c].copy_from_slice(&src[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            index.len(),
            c,
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// Scalar mean over positions with `keep == true`.
    pub fn masked_mean(&mut self, x: NodeId, keep: &[bool]) -> Result<NodeId, DiffError> {
        let (r, c) = self.shape(x);
        if keep.len() != r * c {
            return Err(DiffError::ShapeMismatch {
                op: "masked_mean",
                detail: format!("mask length {} for {r}x{c}", keep.len()),
            });
        }
        let count = keep.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(DiffError::EmptyMask);
        }
        let total: f64 = self.nodes[x.0]
            .data
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(&v, _)| v)
            .sum();
        Ok(self.push(
            1,
            1,
            vec![total / count as f64],
            Op::MaskedMean {
                x,
                keep: keep.to_vec(),
            },
        ))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let (r, c) = self.shape(x);
        let keep = vec![true; r * c];
        self.masked_mean(x, &keep)
    }

    /// Asymmetric squared loss: mean over kept positions of
    /// `|tau - 1(residual < 0)| * residual^2` with `residual = target - pred`.
    pub fn expectile_loss(
        &mut self,
        pred: NodeId,
        target: NodeId,
        tau: f64,
        keep: &[bool],
    ) -> Result<NodeId, DiffError> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(DiffError::BadTau(tau));
        }
        let (r, c) = self.shape(pred);
        let (tr, tc) = self.shape(target);
        if (r, c) != (tr, tc) || keep.len() != r * c {
            return Err(DiffError::ShapeMismatch {
                op: "expectile_loss",
                detail: format!("pred {r}x{c}, target {tr}x{tc}, mask {}", keep.len()),
            });
        }
        let count = keep.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(DiffError::EmptyMask);
        }
        let mut total = 0.0;
        for i in 0..r * c {
            if keep[i] {
                let residual = self.nodes[target.0].data[i] - self.nodes[pred.0].data[i];
                let weight = if residual >= 0.0 { tau } else { 1.0 - tau };
                total += weight * residual * residual;
            }
        }
        Ok(self.push(
            1,
            1,
            vec![total / count as f64],
            Op::Expectile {
                pred,
                target,
                tau,
                keep: keep.to_vec(),
            },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-mode accumulation from a scalar loss. Leaf gradients
    /// accumulate across repeated calls; interior gradients are scratch
    /// space recomputed on every call.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), DiffError> {
        let (r, c) = self.shape(loss);
        if r != 1 || c != 1 {
            return Err(DiffError::NonScalarLoss { rows: r, cols: c });
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad.iter_mut().for_each(|g| *g = 0.0);
            }
        }
        self.nodes[loss.0].grad[0] += 1.0;
        for i in (0..=loss.0).rev() {
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(a);
                    let (_, n) = self.shape(b);
                    let grad = self.nodes[i].grad.clone();
                    // dA = dC @ B^T
                    let bt = transpose_data(&self.nodes[b.0].data, k, n);
                    let mut da = vec![0.0; m * k];
                    matmul_into(&grad, &bt, m, n, k, &mut da);
                    // dB = A^T @ dC
                    let at = transpose_data(&self.nodes[a.0].data, m, k);
                    let mut db = vec![0.0; k * n];
                    matmul_into(&at, &grad, k, m, n, &mut db);
                    accumulate(&mut self.nodes[a.0].grad, &da);
                    accumulate(&mut self.nodes[b.0].grad, &db);
                }
                Op::Transpose(x) => {
                    let (r, c) = self.shape(NodeId(i));
                    let grad = transpose_data(&self.nodes[i].grad, r, c);
                    accumulate(&mut self.nodes[x.0].grad, &grad);
                }
                Op::Add(a, b) => {
                    let grad = self.nodes[i].grad.clone();
                    accumulate(&mut self.nodes[a.0].grad, &grad);
                    accumulate(&mut self.nodes[b.0].grad, &grad);
                }
                Op::Sub(a, b) => {
                    let grad = self.nodes[i].grad.clone();
                    accumulate(&mut self.nodes[a.0].grad, &grad);
                    for (g, &u) in self.nodes[b.0].grad.iter_mut().zip(&grad) {
                        *g -= u;
                    }
                }
                Op::Mul(a, b) => {
                    let grad = self.nodes[i].grad.clone();
                    let bdata = self.nodes[b.0].data.clone();
                    let adata = self.nodes[a.0].data.clone();
                    for ((g, &u), &bv) in self.nodes[a.0].grad.iter_mut().zip(&grad).zip(&bdata) {
                        *g += u * bv;
                    }
                    for ((g, &u), &av) in self.nodes[b.0].grad.iter_mut().zip(&grad).zip(&adata) {
                        *g += u * av;
                    }
                }
                Op::Affine { x, mul } => {
                    let grad = self.nodes[i].grad.clone();
                    for (g, &u) in self.nodes[x.0].grad.iter_mut().zip(&grad) {
                        *g += mul * u;
                    }
                }
                Op::AddRow { x, row } => {
                    let grad = self.nodes[i].grad.clone();
                    let (r, c) = self.shape(NodeId(i));
                    accumulate(&mut self.nodes[x.0].grad, &grad);
                    for i2 in 0..r {
                        for j in 0..c {
                            self.nodes[row.0].grad[j] += grad[i2 * c + j];
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let grad = self.nodes[i].grad.clone();
                    let (r, c) = self.shape(x);
                    let xdata = self.nodes[x.0].data.clone();
                    let gdata = self.nodes[gain.0].data.clone();
                    let cf = c as f64;
                    for i2 in 0..r {
                        let rowv = &xdata[i2 * c..(i2 + 1) * c];
                        let grow = &grad[i2 * c..(i2 + 1) * c];
                        let mean = rowv.iter().sum::<f64>() / cf;
                        let var =
                            rowv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let xhat: Vec<f64> = rowv.iter().map(|v| (v - mean) * inv).collect();
                        let mut dxhat = vec![0.0; c];
                        for j in 0..c {
                            dxhat[j] = grow[j] * gdata[j];
                            self.nodes[gain.0].grad[j] += grow[j] * xhat[j];
                            self.nodes[bias.0].grad[j] += grow[j];
                        }
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            self.nodes[x.0].grad[i2 * c + j] += inv / cf
                                * (cf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                }
                Op::MaskedSoftmax { x, keep } => {
                    let grad = self.nodes[i].grad.clone();
                    let out = self.nodes[i].data.clone();
                    let (r, c) = self.shape(NodeId(i));
                    for i2 in 0..r {
                        let orow = &out[i2 * c..(i2 + 1) * c];
                        let grow = &grad[i2 * c..(i2 + 1) * c];
                        let dot: f64 = orow.iter().zip(grow).map(|(o, g)| o * g).sum();
                        for j in 0..c {
                            if keep[i2 * c + j] {
                                self.nodes[x.0].grad[i2 * c + j] += orow[j] * (grow[j] - dot);
                            }
                        }
                    }
                }
                Op::Gelu(x) => {
                    let grad = self.nodes[i].grad.clone();
                    let xdata = self.nodes[x.0].data.clone();
                    for ((g, &u), &v) in self.nodes[x.0].grad.iter_mut().zip(&grad).zip(&xdata) {
                        *g += u * gelu_grad(v);
                    }
                }
                Op::Sigmoid(x) => {
                    let grad = self.nodes[i].grad.clone();
                    let out = self.nodes[i].data.clone();
                    for ((g, &u), &s) in self.nodes[x.0].grad.iter_mut().zip(&grad).zip(&out) {
                        *g += u * s * (1.0 - s);
                    }
                }
                Op::SliceCols { x, start } => {
                    let grad = self.nodes[i].grad.clone();
                    let (r, len) = self.shape(NodeId(i));
                    let (_, c) = self.shape(x);
                    for i2 in 0..r {
                        for j in 0..len {
                            self.nodes[x.0].grad[i2 * c + start + j] += grad[i2 * len + j];
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let grad = self.nodes[i].grad.clone();
                    let (r, total) = self.shape(NodeId(i));
                    let mut offset = 0;
                    for p in parts {
                        let (_, pc) = self.shape(p);
                        for i2 in 0..r {
                            for j in 0..pc {
                                self.nodes[p.0].grad[i2 * pc + j] +=
                                    grad[i2 * total + offset + j];
                            }
                        }
                        offset += pc;
                    }
                }
                Op::ConcatRows { parts } => {
                    let grad = self.nodes[i].grad.clone();
                    let (_, c) = self.shape(NodeId(i));
                    let mut offset = 0;
                    for p in parts {
                        let (pr, _) = self.shape(p);
                        let chunk = &grad[offset * c..(offset + pr) * c];
                        accumulate(&mut self.nodes[p.0].grad, chunk);
                        offset += pr;
                    }
                }
                Op::GatherRows { x, index } => {
                    let grad = self.nodes[i].grad.clone();
                    let (_, c) = self.shape(x);
                    for (pos, &src_row) in index.iter().enumerate() {
                        for j in 0..c {
                            self.nodes[x.0].grad[src_row * c + j] += grad[pos * c + j];
                        }
                    }
                }
                Op::MaskedMean { x, keep } => {
                    let upstream = self.nodes[i].grad[0];
                    let count = keep.iter().filter(|&&k| k).count() as f64;
                    for (g, &k) in self.nodes[x.0].grad.iter_mut().zip(&keep) {
                        if k {
                            *g += upstream / count;
                        }
                    }
                }
                Op::Expectile {
                    pred,
                    target,
                    tau,
                    keep,
                } => {
                    let upstream = self.nodes[i].grad[0];
                    let count = keep.iter().filter(|&&k| k).count() as f64;
                    let pdata = self.nodes[pred.0].data.clone();
                    let tdata = self.nodes[target.0].data.clone();
                    for idx in 0..pdata.len() {
                        if !keep[idx] {
                            continue;
                        }
                        let residual = tdata[idx] - pdata[idx];
                        let weight = if residual >= 0.0 { tau } else { 1.0 - tau };
                        let d = 2.0 * weight * residual / count * upstream;
                        self.nodes[pred.0].grad[idx] -= d;
                        self.nodes[target.0].grad[idx] += d;
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose_data(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

/// `c += a @ b` with `a: m x k`, `b: k x n`, row-major. The i-k-j loop order
/// keeps the inner loop contiguous.
fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn sigmoid_fwd(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences against the analytic gradient.
    ///
    /// `build` must construct the scalar loss from the flat parameter vector
    /// and return (graph, loss, leaf) so the analytic gradient can be read
    /// off the leaf.
    fn fd_check(
        build: &dyn Fn(&[f64]) -> (Graph, NodeId, NodeId),
        params: &[f64],
        step: f64,
        tol: f64,
    ) {
        let (mut graph, loss, leaf) = build(params);
        graph.backward(loss).unwrap();
        let analytic = graph.grad(leaf).to_vec();

        for i in 0..params.len() {
            let mut plus = params.to_vec();
            plus[i] += step;
            let (gp, lp, _) = build(&plus);
            let mut minus = params.to_vec();
            minus[i] -= step;
            let (gm, lm, _) = build(&minus);
            let fd = (gp.scalar_value(lp) - gm.scalar_value(lm)) / (2.0 * step);
            let diff = (analytic[i] - fd).abs();
            let scale = analytic[i].abs().max(fd.abs());
            assert!(
                diff <= tol * scale || diff <= 1e-6,
                "param {i}: analytic {} vs fd {}",
                analytic[i],
                fd
            );
        }
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Dots the output against fixed coefficients so the scalarization is
    /// sensitive to every entry.
    fn weighted_sum(graph: &mut Graph, x: NodeId, seed: u64) -> NodeId {
        let (r, c) = graph.shape(x);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs = random_vec(&mut rng, r * c);
        let w = graph.leaf(coeffs, r, c);
        let prod = graph.mul(x, w).unwrap();
        let keep = vec![true; r * c];
        graph.masked_mean(prod, &keep).unwrap()
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.scalar(0.0);
        let s = g.sigmoid(x);
        assert_eq!(g.scalar_value(s), 0.5);
    }

    #[test]
    fn softmax_single_unmasked_position_gets_full_weight() {
        let mut g = Graph::new();
        let x = g.leaf(vec![3.0, -1.0, 0.4], 1, 3);
        let s = g.masked_softmax(x, &[false, true, false]).unwrap();
        assert_eq!(g.value(s), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_fully_masked_rows() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0], 1, 2);
        assert!(matches!(
            g.masked_softmax(x, &[false, false]),
            Err(DiffError::FullyMaskedRow(0))
        ));
    }

    #[test]
    fn matmul_identity_is_noop() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3);
        let eye = g.leaf(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 3, 3);
        let y = g.matmul(x, eye).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut g = Graph::new();
        let a = g.leaf(vec![0.0; 6], 2, 3);
        let b = g.leaf(vec![0.0; 4], 2, 2);
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0], 1, 2);
        assert!(matches!(
            g.backward(x),
            Err(DiffError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn square_gradient_matches_hand_value() {
        let mut g = Graph::new();
        let x = g.scalar(3.0);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), &[6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.scalar(3.0);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), &[12.0]);
    }

    #[test]
    fn masked_softmax_gradient_is_zero_on_masked_logits() {
        let mut g = Graph::new();
        let x = g.leaf(vec![0.3, 1.2, -0.7, 0.9], 1, 4);
        let keep = [true, false, true, false];
        let s = g.masked_softmax(x, &keep).unwrap();
        let loss = weighted_sum(&mut g, s, 5);
        g.backward(loss).unwrap();
        let grad = g.grad(x);
        assert_eq!(grad[1], 0.0);
        assert_eq!(grad[3], 0.0);
        assert!(grad[0] != 0.0 && grad[2] != 0.0);
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let mut g = Graph::new();
        let x = g.scalar(2.0);
        let d = g.detach(x);
        let y = g.mul(d, d).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), &[0.0]);
        assert_eq!(g.scalar_value(y), 4.0);
    }

    #[test]
    fn expectile_examples() {
        // Residual +1 weighs tau, residual -1 weighs 1 - tau.
        let mut g = Graph::new();
        let pred = g.scalar(0.0);
        let target = g.scalar(1.0);
        let l = g.expectile_loss(pred, target, 0.99, &[true]).unwrap();
        assert!((g.scalar_value(l) - 0.99).abs() < 1e-12);

        let mut g = Graph::new();
        let pred = g.scalar(1.0);
        let target = g.scalar(0.0);
        let l = g.expectile_loss(pred, target, 0.99, &[true]).unwrap();
        assert!((g.scalar_value(l) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn expectile_half_is_half_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred_v = random_vec(&mut rng, 6);
        let target_v = random_vec(&mut rng, 6);
        let mse: f64 = pred_v
            .iter()
            .zip(&target_v)
            .map(|(p, t)| (t - p) * (t - p))
            .sum::<f64>()
            / 6.0;
        let mut g = Graph::new();
        let pred = g.leaf(pred_v, 2, 3);
        let target = g.leaf(target_v, 2, 3);
        let l = g.expectile_loss(pred, target, 0.5, &[true; 6]).unwrap();
        assert!((g.scalar_value(l) - 0.5 * mse).abs() < 1e-12);
    }

    #[test]
    fn expectile_rejects_bad_tau() {
        let mut g = Graph::new();
        let pred = g.scalar(0.0);
        let target = g.scalar(1.0);
        assert!(matches!(
            g.expectile_loss(pred, target, 1.0, &[true]),
            Err(DiffError::BadTau(_))
        ));
        assert!(g.expectile_loss(pred, target, 0.0, &[true]).is_err());
    }

    #[test]
    fn expectile_penalizes_overprediction_less_when_tau_high() {
        let tau = 0.9;
        let mut g = Graph::new();
        let over = g.scalar(1.0);
        let under = g.scalar(-1.0);
        let target = g.scalar(0.0);
        let l_over = g.expectile_loss(over, target, tau, &[true]).unwrap();
        let l_under = g.expectile_loss(under, target, tau, &[true]).unwrap();
        assert!(g.scalar_value(l_over) < g.scalar_value(l_under));
    }

    // ── per-op finite-difference checks ─────────────────────────────

    #[test]
    fn gradcheck_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = random_vec(&mut rng, 3 * 4 + 4 * 2);
        fd_check(
            &|p: &[f64]| {
                let mut g = Graph::new();
                let leaf = g.leaf(p.to_vec(), 1, p.len());
                let a = g.slice_cols(leaf, 0, 12).unwrap();
                let a = {
                    // reshape 1x12 -> 3x4 through gather of the flat row
                    let t = g.transpose(a);
                    let idx: Vec<usize> = (0..12).collect();
                    let rows = g.gather_rows(t, &idx).unwrap();
                    // rows is 12x1; build 3x4 by concatenating row slices
                    let mut parts = Vec::new();
                    for r in 0..3 {
                        let chunk = g.gather_rows(rows, &[r * 4, r * 4 + 1, r * 4 + 2, r * 4 + 3]).unwrap();
                        parts.push(g.transpose(chunk));
                    }
                    g.concat_rows(&parts).unwrap()
                };
                let b = g.slice_cols(leaf, 12, 8).unwrap();
                let b = {
                    let t = g.transpose(b);
                    let mut parts = Vec::new();
                    for r in 0..4 {
                        let chunk = g.gather_rows(t, &[r * 2, r * 2 + 1]).unwrap();
                        parts.push(g.transpose(chunk));
                    }
                    g.concat_rows(&parts).unwrap()
                };
                let c = g.matmul(a, b).unwrap();
                let loss = weighted_sum(&mut g, c, 99);
                (g, loss, leaf)
            },
            &params,
            1e-4,
            1e-5,
        );
    }

    #[test]
    fn gradcheck_elementwise_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = random_vec(&mut rng, 12);
        fd_check(
            &|p: &[f64]| {
                let mut g = Graph::new();
                let leaf = g.leaf(p.to_vec(), 3, 4);
                let act = g.gelu(leaf);
                let sig = g.sigmoid(act);
                let scaled = g.affine(sig, 1.7, -0.3);
                let prod = g.mul(scaled, leaf).unwrap();
                let diff = g.sub(prod, leaf).unwrap();
                let sum = g.add(diff, scaled).unwrap();
                let loss = weighted_sum(&mut g, sum, 100);
                (g, loss, leaf)
            },
            &params,
            1e-4,
            1e-5,
        );
    }

    #[test]
    fn gradcheck_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = random_vec(&mut rng, 3 * 5 + 5 + 5);
        fd_check(
            &|p: &[f64]| {
                let mut g = Graph::new();
                let leaf = g.leaf(p.to_vec(), 1, p.len());
                let flat_x = g.slice_cols(leaf, 0, 15).unwrap();
                let t = g.transpose(flat_x);
                let mut parts = Vec::new();
                for r in 0..3 {
                    let idx: Vec<usize> = (r * 5..(r + 1) * 5).collect();
                    let chunk = g.gather_rows(t, &idx).unwrap();
                    parts.push(g.transpose(chunk));
                }
                let x = g.concat_rows(&parts).unwrap();
                let gain = g.slice_cols(leaf, 15, 5).unwrap();
                let bias = g.slice_cols(leaf, 20, 5).unwrap();
                let ln = g.layer_norm(x, gain, bias).unwrap();
                let loss = weighted_sum(&mut g, ln, 101);
                (g, loss, leaf)
            },
            &params,
            1e-4,
            1e-4,
        );
    }

    #[test]
    fn gradcheck_masked_softmax_and_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = random_vec(&mut rng, 8);
        let keep = [true, true, false, true, false, true, true, true];
        fd_check(
            &|p: &[f64]| {
                let mut g = Graph::new();
                let leaf = g.leaf(p.to_vec(), 2, 4);
                let sm = g.masked_softmax(leaf, &keep).unwrap();
                let loss = weighted_sum(&mut g, sm, 102);
                (g, loss, leaf)
            },
            &params,
            1e-4,
            1e-5,
        );
    }

    #[test]
    fn gradcheck_expectile() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = random_vec(&mut rng, 6);
        let target: Vec<f64> = random_vec(&mut rng, 6);
        let keep = [true, true, true, false, true, true];
        fd_check(
            &|p: &[f64]| {
                let mut g = Graph::new();
                let leaf = g.leaf(p.to_vec(), 2, 3);
                let t = g.leaf(target.clone(), 2, 3);
                let loss = g.expectile_loss(leaf, t, 0.99, &keep).unwrap();
                (g, loss, leaf)
            },
            &params,
            1e-4,
            1e-4,
        );
    }

    #[test]
    fn gradcheck_slice_concat_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = random_vec(&mut rng, 12);
        fd_check(
            &|p: &[f64]| {
                let mut g = Graph::new();
                let leaf = g.leaf(p.to_vec(), 3, 4);
                let left = g.slice_cols(leaf, 0, 2).unwrap();
                let right = g.slice_cols(leaf, 2, 2).unwrap();
                let swapped = g.concat_cols(&[right, left]).unwrap();
                let gathered = g.gather_rows(swapped, &[2, 0, 1, 0]).unwrap();
                let stacked = g.concat_rows(&[gathered, swapped]).unwrap();
                let loss = weighted_sum(&mut g, stacked, 103);
                (g, loss, leaf)
            },
            &params,
            1e-4,
            1e-5,
        );
    }

    #[test]
    fn gradcheck_add_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = random_vec(&mut rng, 3 * 4 + 4);
        fd_check(
            &|p: &[f64]| {
                let mut g = Graph::new();
                let leaf = g.leaf(p.to_vec(), 1, p.len());
                let t = g.transpose(leaf);
                let mut parts = Vec::new();
                for r in 0..3 {
                    let idx: Vec<usize> = (r * 4..(r + 1) * 4).collect();
                    let chunk = g.gather_rows(t, &idx).unwrap();
                    parts.push(g.transpose(chunk));
                }
                let x = g.concat_rows(&parts).unwrap();
                let row = g.slice_cols(leaf, 12, 4).unwrap();
                let sum = g.add_row(x, row).unwrap();
                let loss = weighted_sum(&mut g, sum, 104);
                (g, loss, leaf)
            },
            &params,
            1e-4,
            1e-5,
        );
    }
}

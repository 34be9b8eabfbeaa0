//! A small reverse-mode automatic differentiation tape over [`Matrix`] values.
//!
//! Nodes are appended in evaluation order, so every parent has a smaller id
//! than its child and a single reverse sweep computes all gradients. The op
//! set is just what the re-ID model and its losses need, with a few fused
//! ops (entropy, row normalisation, pairwise distances, cross-entropy) whose
//! derivatives are written out by hand.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::tensor::{gemm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Spatial bookkeeping for a 2-D convolution over pixel-major batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }

    /// Unfolds the input into a `(b·oh·ow) × (k·k·cin)` patch matrix.
    fn im2col(&self, input: &[f64]) -> Matrix {
        let (oh, ow) = (self.out_h(), self.out_w());
        let patch = self.patch_len();
        let mut cols = Matrix::zeros(self.batch * oh * ow, patch);
        let data = cols.data_mut();
        for b in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * patch;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            let src = ((b * self.in_h + iy as usize) * self.in_w + ix as usize)
                                * self.in_c;
                            let dst = row + (ky * self.kernel + kx) * self.in_c;
                            data[dst..dst + self.in_c]
                                .copy_from_slice(&input[src..src + self.in_c]);
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Self::im2col`].
    fn col2im(&self, cols: &Matrix) -> Matrix {
        let (oh, ow) = (self.out_h(), self.out_w());
        let patch = self.patch_len();
        let mut out = Matrix::zeros(self.batch * self.in_h * self.in_w, self.in_c);
        let data = out.data_mut();
        let src_all = cols.data();
        for b in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * patch;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            let dst = ((b * self.in_h + iy as usize) * self.in_w + ix as usize)
                                * self.in_c;
                            let src = row + (ky * self.kernel + kx) * self.in_c;
                            for c in 0..self.in_c {
                                data[dst + c] += src_all[src + c];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `aᵀ · b`
    MatMulTn(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// Adds a `1×m` row to every row.
    AddRow(NodeId, NodeId),
    /// Scales row `r` by entry `r` of an `n×1` column.
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    EntropyRows(NodeId),
    Threshold(NodeId, f64),
    ClampMin(NodeId, f64),
    SumRows(NodeId),
    SumCols(NodeId),
    SumAll(NodeId),
    NormalizeRows { input: NodeId, norms: Vec<f64> },
    StandardizeRows { input: NodeId, inv_std: Vec<f64> },
    PairwiseDist(NodeId),
    SliceRows { input: NodeId, start: usize },
    GatherRows { input: NodeId, index: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    GatherEntries { input: NodeId, index: Vec<usize> },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Matrix },
    NllProbs { probs: NodeId, labels: Vec<usize> },
    Conv2d { input: NodeId, weight: NodeId, geom: ConvGeometry, cols: Matrix },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Below this norm a row is treated as the zero vector by `normalize_rows`.
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.grads.get_mut(id.0).and_then(Option::take)
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, parents: &[NodeId]) -> NodeId {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that gradients are tracked for.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows(), "matmul_tn row mismatch");
        let (m, k, n) = (av.cols(), av.rows(), bv.cols());
        let mut out = Matrix::zeros(m, n);
        gemm(m, k, n, (av.data(), 1, m), (bv.data(), n, 1), out.data_mut(), 0.0);
        self.push(out, Op::MatMulTn(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), &[a])
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Matrix::from_vec(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.zip(a, b, |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.zip(a, b, |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.zip(a, b, |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.zip(a, b, |x, y| x / y);
        self.push(value, Op::Div(a, b), &[a, b])
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "add_row expects a 1×cols row");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!(cv.shape(), (av.rows(), 1), "mul_col expects a rows×1 column");
        let mut out = av.clone();
        for r in 0..out.rows() {
            let s = cv.data()[r];
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        self.push(out, Op::MulCol(a, col), &[a, col])
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let value = self.value(a).map(|v| v * k);
        self.push(value, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        let value = self.value(a).map(|v| v + k);
        self.push(value, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    /// Per-row Shannon entropy in nats, `0·ln 0 := 0`. Output is `rows × 1`.
    pub fn entropy_rows(&mut self, p: NodeId) -> NodeId {
        let pv = self.value(p);
        let data = (0..pv.rows())
            .map(|r| crate::segmap::shannon_entropy(pv.row(r)))
            .collect();
        self.push(Matrix::column(data), Op::EntropyRows(p), &[p])
    }

    /// Keeps entries `>= tau`, zeroes the rest.
    pub fn threshold(&mut self, a: NodeId, tau: f64) -> NodeId {
        let value = self.value(a).map(|v| if v >= tau { v } else { 0.0 });
        self.push(value, Op::Threshold(a, tau), &[a])
    }

    pub fn clamp_min(&mut self, a: NodeId, min: f64) -> NodeId {
        let value = self.value(a).map(|v| v.max(min));
        self.push(value, Op::ClampMin(a, min), &[a])
    }

    /// Column sums, `1 × cols`.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut out = Matrix::zeros(1, av.cols());
        for r in 0..av.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(av.row(r)) {
                *o += v;
            }
        }
        self.push(out, Op::SumRows(a), &[a])
    }

    /// Row sums, `rows × 1`.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        self.push(Matrix::column(data), Op::SumCols(a), &[a])
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Matrix::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Scales each row to unit Euclidean norm. Rows with norm below
    /// [`NORMALIZE_EPS`] become zero and pass no gradient.
    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut out = av.clone();
        let mut norms = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let norm = av.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(norm);
            let row = out.row_mut(r);
            if norm < NORMALIZE_EPS {
                row.iter_mut().for_each(|v| *v = 0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        self.push(out, Op::NormalizeRows { input: a, norms }, &[a])
    }

    /// Centres each row and scales it to unit variance, `(x − μ)/√(σ² + eps)`.
    pub fn standardize_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let av = self.value(a);
        let n = av.cols() as f64;
        let mut out = av.clone();
        let mut inv_std = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let k = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * k);
            inv_std.push(k);
        }
        self.push(out, Op::StandardizeRows { input: a, inv_std }, &[a])
    }

    /// Euclidean distances between all row pairs, `rows × rows`.
    pub fn pairwise_dist(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let n = av.rows();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let d = euclidean(av.row(i), av.row(j));
                out.set(i, j, d);
                out.set(j, i, d);
            }
        }
        self.push(out, Op::PairwiseDist(a), &[a])
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value(a);
        assert!(start + len <= av.rows(), "slice_rows out of range");
        let cols = av.cols();
        let data = av.data()[start * cols..(start + len) * cols].to_vec();
        self.push(Matrix::from_vec(len, cols, data), Op::SliceRows { input: a, start }, &[a])
    }

    pub fn gather_rows(&mut self, a: NodeId, index: Vec<usize>) -> NodeId {
        let av = self.value(a);
        let cols = av.cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &r in &index {
            data.extend_from_slice(av.row(r));
        }
        let out = Matrix::from_vec(index.len(), cols, data);
        self.push(out, Op::GatherRows { input: a, index }, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Picks entries by flat row-major index into a `k × 1` column.
    pub fn gather_entries(&mut self, a: NodeId, index: Vec<usize>) -> NodeId {
        let av = self.value(a);
        let data = index.iter().map(|&i| av.data()[i]).collect();
        self.push(Matrix::column(data), Op::GatherEntries { input: a, index }, &[a])
    }

    /// Per-row softmax cross-entropy `-ln softmax(logits)[label]`, `rows × 1`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), labels.len(), "one label per row");
        let probs = softmax_rows(lv);
        let data = labels
            .iter()
            .enumerate()
            .map(|(r, &y)| {
                let row = lv.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[y]
            })
            .collect();
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(Matrix::column(data), op, &[logits])
    }

    /// Per-row negative log-likelihood `-ln p[label]` of a probability matrix.
    pub fn nll_probs(&mut self, probs: NodeId, labels: &[usize]) -> NodeId {
        let pv = self.value(probs);
        assert_eq!(pv.rows(), labels.len(), "one label per row");
        let data = labels
            .iter()
            .enumerate()
            .map(|(r, &y)| -pv.get(r, y).ln())
            .collect();
        let op = Op::NllProbs {
            probs,
            labels: labels.to_vec(),
        };
        self.push(Matrix::column(data), op, &[probs])
    }

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, geom: ConvGeometry) -> NodeId {
        let iv = self.value(input);
        let wv = self.value(weight);
        assert_eq!(iv.shape(), (geom.batch * geom.in_h * geom.in_w, geom.in_c), "conv input shape");
        assert_eq!(wv.shape(), (geom.patch_len(), geom.out_c), "conv weight shape");
        let cols = geom.im2col(iv.data());
        let out = cols.matmul(wv);
        self.push(out, Op::Conv2d { input, weight, geom, cols }, &[input, weight])
    }

    /// A hash of every data-dependent branch taken while building the graph
    /// (ReLU and threshold activity, clamps, zero-norm rows, index choices).
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let bits: Vec<bool> = match &node.op {
                Op::Relu(a) => self.value(*a).data().iter().map(|&v| v > 0.0).collect(),
                Op::Threshold(a, tau) => self.value(*a).data().iter().map(|&v| v >= *tau).collect(),
                Op::ClampMin(a, m) => self.value(*a).data().iter().map(|&v| v > *m).collect(),
                Op::NormalizeRows { norms, .. } => norms.iter().map(|&n| n < NORMALIZE_EPS).collect(),
                Op::GatherEntries { index, .. } | Op::GatherRows { index, .. } => {
                    index.hash(&mut h);
                    continue;
                }
                _ => continue,
            };
            i.hash(&mut h);
            bits.hash(&mut h);
        }
        h.finish()
    }

    /// Reverse sweep from a `1×1` node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    gemm(g.rows(), g.cols(), bv.rows(), (g.data(), g.cols(), 1), (bv.data(), 1, bv.cols()), da.data_mut(), 0.0);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · G
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(av.cols(), av.rows(), g.cols(), (av.data(), 1, av.cols()), (g.data(), g.cols(), 1), db.data_mut(), 0.0);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulTn(a, b) => {
                // out = Aᵀ B, A: k×m, B: k×n, G: m×n
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    // dA = B · Gᵀ  (k×m)
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    gemm(bv.rows(), bv.cols(), g.rows(), (bv.data(), bv.cols(), 1), (g.data(), 1, g.cols()), da.data_mut(), 0.0);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    // dB = A · G  (k×n)
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(av.rows(), av.cols(), g.cols(), (av.data(), av.cols(), 1), (g.data(), g.cols(), 1), db.data_mut(), 0.0);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, elementwise(g, bv, |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, elementwise(g, av, |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.wants(*a) {
                    self.accumulate(grads, *a, elementwise(g, bv, |x, y| x / y));
                }
                if self.wants(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = elementwise(g, out, |x, y| x * y);
                    self.accumulate(grads, *b, elementwise(&t, bv, |x, y| -x / y));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*row) {
                    let mut dr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in dr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                if self.wants(*a) {
                    let mut da = g.clone();
                    for r in 0..da.rows() {
                        let s = cv.data()[r];
                        da.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*col) {
                    let data = (0..g.rows())
                        .map(|r| g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    self.accumulate(grads, *col, Matrix::column(data));
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.map(|v| v * k)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, elementwise(g, av, |x, y| if y > 0.0 { x } else { 0.0 }));
            }
            Op::SoftmaxRows(a) => {
                // dx = y ⊙ (g − ⟨g, y⟩)
                let mut da = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in da.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::EntropyRows(p) => {
                // dH/dp = -(ln p + 1), with the p = 0 limit taken as 0.
                let pv = self.value(*p);
                let mut dp = Matrix::zeros(pv.rows(), pv.cols());
                for r in 0..pv.rows() {
                    let gr = g.data()[r];
                    for (d, &v) in dp.row_mut(r).iter_mut().zip(pv.row(r)) {
                        *d = if v > 0.0 { -gr * (v.ln() + 1.0) } else { 0.0 };
                    }
                }
                self.accumulate(grads, *p, dp);
            }
            Op::Threshold(a, tau) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, elementwise(g, av, |x, y| if y >= *tau { x } else { 0.0 }));
            }
            Op::ClampMin(a, m) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, elementwise(g, av, |x, y| if y > *m { x } else { 0.0 }));
            }
            Op::SumRows(a) => {
                let av = self.value(*a);
                let mut da = Matrix::zeros(av.rows(), av.cols());
                for r in 0..da.rows() {
                    da.row_mut(r).copy_from_slice(g.data());
                }
                self.accumulate(grads, *a, da);
            }
            Op::SumCols(a) => {
                let av = self.value(*a);
                let mut da = Matrix::zeros(av.rows(), av.cols());
                for r in 0..da.rows() {
                    let v = g.data()[r];
                    da.row_mut(r).iter_mut().for_each(|x| *x = v);
                }
                self.accumulate(grads, *a, da);
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, Matrix::filled(av.rows(), av.cols(), g.item()));
            }
            Op::NormalizeRows { input, norms } => {
                // For y = x/|x|: dx = (g − y⟨g, y⟩)/|x|
                let mut da = Matrix::zeros(out.rows(), out.cols());
                for (r, &norm) in norms.iter().enumerate() {
                    if norm < NORMALIZE_EPS {
                        continue;
                    }
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in da.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *d = (gv - yv * dot) / norm;
                    }
                }
                self.accumulate(grads, *input, da);
            }
            Op::StandardizeRows { input, inv_std } => {
                // dx = (g − mean(g) − y·mean(g ⊙ y)) / σ
                let n = out.cols() as f64;
                let mut da = Matrix::zeros(out.rows(), out.cols());
                for (r, &k) in inv_std.iter().enumerate() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = y.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((d, yv), gv) in da.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *d = (gv - mg - yv * mgy) * k;
                    }
                }
                self.accumulate(grads, *input, da);
            }
            Op::PairwiseDist(a) => {
                let av = self.value(*a);
                let n = av.rows();
                let mut da = Matrix::zeros(av.rows(), av.cols());
                for i in 0..n {
                    for j in 0..n {
                        let d = out.get(i, j);
                        if i == j || d == 0.0 {
                            continue;
                        }
                        // Entry (i, j) contributes to row i; its mirror (j, i) handles row j.
                        let coef = (g.get(i, j) + g.get(j, i)) / d;
                        if coef == 0.0 || j < i {
                            continue;
                        }
                        let (xi, xj) = (av.row(i).to_vec(), av.row(j).to_vec());
                        for c in 0..av.cols() {
                            let diff = xi[c] - xj[c];
                            da.data_mut()[i * av.cols() + c] += coef * diff;
                            da.data_mut()[j * av.cols() + c] -= coef * diff;
                        }
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::SliceRows { input, start } => {
                if self.wants(*input) {
                    let iv = self.value(*input);
                    let mut da = Matrix::zeros(iv.rows(), iv.cols());
                    let cols = iv.cols();
                    da.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                    self.accumulate(grads, *input, da);
                }
            }
            Op::GatherRows { input, index } => {
                if self.wants(*input) {
                    let iv = self.value(*input);
                    let mut da = Matrix::zeros(iv.rows(), iv.cols());
                    for (k, &r) in index.iter().enumerate() {
                        for (d, v) in da.row_mut(r).iter_mut().zip(g.row(k)) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *input, da);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let len = pv.len();
                    if self.wants(p) {
                        let slice = g.data()[offset..offset + len].to_vec();
                        self.accumulate(grads, p, Matrix::from_vec(pv.rows(), pv.cols(), slice));
                    }
                    offset += len;
                }
            }
            Op::GatherEntries { input, index } => {
                let iv = self.value(*input);
                let mut da = Matrix::zeros(iv.rows(), iv.cols());
                for (k, &e) in index.iter().enumerate() {
                    da.data_mut()[e] += g.data()[k];
                }
                self.accumulate(grads, *input, da);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let mut dl = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    let gr = g.data()[r];
                    let row = dl.row_mut(r);
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= gr);
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::NllProbs { probs, labels } => {
                let pv = self.value(*probs);
                let mut dp = Matrix::zeros(pv.rows(), pv.cols());
                for (r, &y) in labels.iter().enumerate() {
                    dp.set(r, y, -g.data()[r] / pv.get(r, y));
                }
                self.accumulate(grads, *probs, dp);
            }
            Op::Conv2d { input, weight, geom, cols } => {
                if self.wants(*weight) {
                    let wv = self.value(*weight);
                    let mut dw = Matrix::zeros(wv.rows(), wv.cols());
                    gemm(cols.cols(), cols.rows(), g.cols(), (cols.data(), 1, cols.cols()), (g.data(), g.cols(), 1), dw.data_mut(), 0.0);
                    self.accumulate(grads, *weight, dw);
                }
                if self.wants(*input) {
                    let wv = self.value(*weight);
                    let mut dcols = Matrix::zeros(cols.rows(), cols.cols());
                    gemm(g.rows(), g.cols(), wv.rows(), (g.data(), g.cols(), 1), (wv.data(), 1, wv.cols()), dcols.data_mut(), 0.0);
                    self.accumulate(grads, *input, geom.col2im(&dcols));
                }
            }
        }
    }
}

fn elementwise(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

pub(crate) fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central differences of `f` at `x`, compared entrywise with the tape.
    fn check(x: Matrix, build: impl Fn(&mut Graph, NodeId) -> NodeId) {
        let mut g = Graph::new();
        let xid = g.param(x.clone());
        let loss = build(&mut g, xid);
        let grads = g.backward(loss);
        let analytic = grads.get(xid).cloned().unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
        let h = 1e-6;
        for k in 0..x.len() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[k] += delta;
                let mut g = Graph::new();
                let id = g.param(xp);
                let l = build(&mut g, id);
                g.value(l).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "entry {k}: analytic {a} vs numeric {numeric}");
        }
    }

    #[test]
    fn elementwise_and_reduction_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&mut rng, 3, 4);
        check(random(&mut rng, 3, 4), move |g, x| {
            let c = g.constant(w.clone());
            let m = g.mul(x, c);
            let s = g.sub(m, x);
            let d = g.add_scalar(x, 3.0);
            let q = g.div(s, d);
            let cs = g.sum_cols(q);
            let rs = g.sum_rows(q);
            let a = g.sum_all(cs);
            let b = g.sum_all(rs);
            let b2 = g.mul(b, b);
            g.add(a, b2)
        });
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = random(&mut rng, 4, 2);
        let c = random(&mut rng, 3, 5);
        check(random(&mut rng, 3, 4), move |g, x| {
            let bn = g.constant(b.clone());
            let cn = g.constant(c.clone());
            let y = g.matmul(x, bn); // 3×2
            let z = g.matmul_tn(x, cn); // 4×5
            let zt = g.transpose(z);
            let y2 = g.mul(y, y);
            let s1 = g.sum_all(y2);
            let z2 = g.mul(zt, zt);
            let s2 = g.sum_all(z2);
            let xx = g.matmul_tn(x, x);
            let s3 = g.sum_all(xx);
            let t = g.add(s1, s2);
            g.add(t, s3)
        });
    }

    #[test]
    fn softmax_entropy_and_nll_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(random(&mut rng, 5, 4), |g, x| {
            let p = g.softmax_rows(x);
            let e = g.entropy_rows(p);
            let e2 = g.mul(e, e);
            let nll = g.nll_probs(p, &[0, 1, 2, 3, 0]);
            let a = g.sum_all(e2);
            let b = g.sum_all(nll);
            g.add(a, b)
        });
    }

    #[test]
    fn normalize_distance_and_gather_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(random(&mut rng, 4, 3), |g, x| {
            let n = g.normalize_rows(x);
            let d = g.pairwise_dist(n);
            let d2 = g.mul(d, d);
            let sel = g.gather_entries(d, vec![1, 6, 11, 4]);
            let rows = g.gather_rows(n, vec![3, 0, 0]);
            let r2 = g.mul(rows, rows);
            let a = g.sum_all(d2);
            let b = g.sum_all(sel);
            let c = g.sum_all(r2);
            let t = g.add(a, b);
            g.add(t, c)
        });
    }

    #[test]
    fn standardize_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = random(&mut rng, 3, 5);
        check(random(&mut rng, 3, 5), move |g, x| {
            let y = g.standardize_rows(x, 1e-3);
            let c = g.constant(w.clone());
            let m = g.mul(y, c);
            let m2 = g.mul(m, y);
            let a = g.sum_all(m);
            let b = g.sum_all(m2);
            g.add(a, b)
        });
    }

    #[test]
    fn standardized_rows_have_zero_mean_unit_variance() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_vec(2, 4, vec![1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]));
        let y = g.standardize_rows(x, 0.0);
        for r in 0..2 {
            let row = g.value(y).row(r);
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_slice_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check(random(&mut rng, 4, 3), |g, x| {
            let top = g.slice_rows(x, 0, 1);
            let col = g.slice_rows(x, 1, 3);
            let colsum = g.sum_cols(col);
            let a = g.add_row(x, top);
            let rest = g.slice_rows(x, 1, 3);
            let b = g.mul_col(rest, colsum);
            let cat = g.concat_rows(&[a, b]);
            let cat2 = g.mul(cat, cat);
            let s = g.sum_all(cat2);
            let t = g.transpose(x);
            let st = g.sum_all(t);
            g.mul(s, st)
        });
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        check(random(&mut rng, 3, 5), |g, x| {
            let ce = g.cross_entropy(x, &[4, 0, 2]);
            let w = g.constant(Matrix::column(vec![0.2, 1.0, 3.0]));
            let weighted = g.mul(ce, w);
            g.sum_all(weighted)
        });
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let geom = ConvGeometry {
            batch: 2,
            in_h: 5,
            in_w: 4,
            in_c: 2,
            out_c: 3,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let w = random(&mut rng, 18, 3);
        let x = random(&mut rng, 2 * 5 * 4, 2);
        let wc = w.clone();
        check(x.clone(), move |g, xid| {
            let wn = g.constant(wc.clone());
            let y = g.conv2d(xid, wn, geom);
            let y2 = g.mul(y, y);
            g.sum_all(y2)
        });
        check(w, move |g, wid| {
            let xn = g.constant(x.clone());
            let y = g.conv2d(xn, wid, geom);
            let r = g.relu(y);
            let y2 = g.mul(r, y);
            g.sum_all(y2)
        });
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let geom = ConvGeometry {
            batch: 1,
            in_h: 4,
            in_w: 3,
            in_c: 2,
            out_c: 2,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let x = random(&mut rng, 12, 2);
        let w = random(&mut rng, 18, 2);
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let wn = g.constant(w.clone());
        let y = g.conv2d(xn, wn, geom);
        let yv = g.value(y);
        for oy in 0..4 {
            for ox in 0..3 {
                for co in 0..2 {
                    let mut acc = 0.0;
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let (iy, ix) = (oy as i64 + ky - 1, ox as i64 + kx - 1);
                            if !(0..4).contains(&iy) || !(0..3).contains(&ix) {
                                continue;
                            }
                            for ci in 0..2 {
                                let xv = x.get((iy * 3 + ix) as usize, ci);
                                let wv = w.get(((ky * 3 + kx) * 2) as usize + ci, co);
                                acc += xv * wv;
                            }
                        }
                    }
                    assert!((yv.get(oy * 3 + ox, co) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Matrix::scalar(2.0));
        let p = g.param(Matrix::scalar(3.0));
        let y = g.mul(c, p);
        let grads = g.backward(y);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().item(), 2.0);
    }
}

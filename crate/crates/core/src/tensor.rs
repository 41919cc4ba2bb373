//! Dense tensor arithmetic with reverse-mode automatic differentiation.
//!
//! Values are stored as row-major `f32`; every reduction (dot products,
//! softmax sums, norm statistics, loss means) accumulates in `f64` so that
//! finite-difference gradient checks stay tight at toy scale. The tape is
//! rebuilt on every forward pass (define-by-run) and is strictly
//! single-threaded; parallel callers each own a tape.

use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataShape { len: usize, shape: Vec<usize> },
    #[error("{op}: expected a rank-2 tensor, got shape {shape:?}")]
    NotMatrix {
        op: &'static str,
        shape: Vec<usize>,
    },
    #[error("backward: loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("cross entropy: all {0} positions carry the ignore id, mean is undefined")]
    AllIgnored(usize),
    #[error("cross entropy: target id {id} out of range for vocab size {vocab}")]
    TargetOutOfRange { id: u32, vocab: usize },
    #[error("embedding: id {id} out of range for table with {rows} rows")]
    IdOutOfRange { id: u32, rows: usize },
    #[error("slice_cols: columns {start}..{end} out of bounds for width {cols}")]
    SliceBounds {
        start: usize,
        end: usize,
        cols: usize,
    },
    #[error("concat_cols: parts disagree on row count ({0} vs {1})")]
    ConcatRows(usize, usize),
    #[error("concat_cols: empty part list")]
    ConcatEmpty,
    #[error("rel_bias: head {head} out of range for {heads} heads")]
    HeadOutOfRange { head: usize, heads: usize },
}

/// Immutable dense tensor: shape plus row-major `f32` storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataShape {
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
        }
    }

    /// Marks the tensor as a differentiation target.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Owner-side mutation for optimizers; values on a tape are never
    /// touched through this.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::NotMatrix {
                op,
                shape: self.shape.clone(),
            }),
        }
    }
}

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations recorded on the tape.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a[m,k] @ b[k,n]
    MatMul { a: NodeId, b: NodeId },
    /// a[m,k] @ b[n,k]^T
    MatMulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// Row vector broadcast over matrix rows; the one documented broadcast.
    AddRow { a: NodeId, row: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f32 },
    Relu { a: NodeId },
    SoftmaxRows { a: NodeId },
    RmsNorm { a: NodeId, gain: NodeId, eps: f32 },
    Embedding { table: NodeId, ids: Vec<u32> },
    /// out[i,j] = table[buckets[i*cols+j], head]
    RelBias {
        table: NodeId,
        buckets: Arc<Vec<u16>>,
        head: usize,
    },
    SliceCols { a: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
        ignore: u32,
    },
    Sum { a: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
    /// True when a requires_grad leaf is reachable through this node.
    needs_grad: bool,
    /// Reductions keep a 64-bit copy of scalar outputs for tight oracles.
    scalar64: Option<f64>,
}

/// Ordered record of primitive operations: inputs always precede outputs,
/// so one reverse sweep visits each node exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Row-major matmul with 64-bit accumulation: a[m,k] @ b[k,n].
pub fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc[..n].fill(0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let aip = aip as f64;
            let brow = &b[p * n..(p + 1) * n];
            for (j, &bpj) in brow.iter().enumerate() {
                acc[j] += aip * bpj as f64;
            }
        }
        for j in 0..n {
            out[i * n + j] = acc[j] as f32;
        }
    }
    out
}

/// a[m,k] @ b[n,k]^T with 64-bit accumulation.
fn matmul_nt_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0f64;
            for p in 0..k {
                s += arow[p] as f64 * brow[p] as f64;
            }
            out[i * n + j] = s as f32;
        }
    }
    out
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// 64-bit value of a scalar reduction node, falling back to f32 storage.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let node = &self.nodes[id.0];
        node.scalar64.unwrap_or_else(|| node.value.data[0] as f64)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let needs = value.requires_grad;
        self.push(Op::Leaf, value, needs, None)
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool, scalar64: Option<f64>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            scalar64,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let data = matmul_raw(&self.value(a).data, &self.value(b).data, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(vec![m, n], data).expect("matmul output shape");
        Ok(self.push(Op::MatMul { a, b }, value, needs, None))
    }

    /// a[m,k] @ b[n,k]^T -> [m,n]; used for attention scores and tied logits.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, k) = self.value(a).dims2("matmul_nt")?;
        let (n, k2) = self.value(b).dims2("matmul_nt")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let data = matmul_nt_raw(&self.value(a).data, &self.value(b).data, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(vec![m, n], data).expect("matmul_nt output shape");
        Ok(self.push(Op::MatMulNt { a, b }, value, needs, None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.value(a).shape != self.value(b).shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let data: Vec<f32> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Op::Add { a, b },
            Tensor::new(shape, data).expect("add shape"),
            needs,
            None,
        ))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = self.value(a).dims2("add_row")?;
        let rshape = self.value(row).shape.clone();
        let ok = rshape == [n] || rshape == [1, n];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: vec![m, n],
                rhs: rshape,
            });
        }
        let mut data = self.value(a).data.clone();
        let rdata = &self.value(row).data;
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += rdata[j];
            }
        }
        let needs = self.needs(a) || self.needs(row);
        Ok(self.push(
            Op::AddRow { a, row },
            Tensor::new(vec![m, n], data).expect("add_row shape"),
            needs,
            None,
        ))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.value(a).shape != self.value(b).shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let data: Vec<f32> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Op::Mul { a, b },
            Tensor::new(shape, data).expect("mul shape"),
            needs,
            None,
        ))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        let data: Vec<f32> = self.value(a).data.iter().map(|x| x * c).collect();
        let shape = self.value(a).shape.clone();
        let needs = self.needs(a);
        self.push(
            Op::Scale { a, c },
            Tensor::new(shape, data).expect("scale shape"),
            needs,
            None,
        )
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f32> = self.value(a).data.iter().map(|x| x.max(0.0)).collect();
        let shape = self.value(a).shape.clone();
        let needs = self.needs(a);
        self.push(
            Op::Relu { a },
            Tensor::new(shape, data).expect("relu shape"),
            needs,
            None,
        )
    }

    /// Softmax over the last axis of a rank-2 tensor, stabilized by the row max.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = self.value(a).dims2("softmax_rows")?;
        let src = &self.value(a).data;
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut sum = 0.0f64;
            let mut exps = vec![0.0f64; n];
            for j in 0..n {
                let e = ((row[j] as f64) - max).exp();
                exps[j] = e;
                sum += e;
            }
            for j in 0..n {
                data[i * n + j] = (exps[j] / sum) as f32;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Op::SoftmaxRows { a },
            Tensor::new(vec![m, n], data).expect("softmax shape"),
            needs,
            None,
        ))
    }

    /// RMS normalization over the last axis with a learned per-feature gain.
    pub fn rms_norm(&mut self, a: NodeId, gain: NodeId) -> Result<NodeId, TensorError> {
        const EPS: f32 = 1e-6;
        let (m, n) = self.value(a).dims2("rms_norm")?;
        let gshape = self.value(gain).shape.clone();
        if gshape != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "rms_norm",
                lhs: vec![m, n],
                rhs: gshape,
            });
        }
        let src = &self.value(a).data;
        let g = &self.value(gain).data;
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mut ss = 0.0f64;
            for &x in row {
                ss += (x as f64) * (x as f64);
            }
            let inv = 1.0 / (ss / n as f64 + EPS as f64).sqrt();
            for j in 0..n {
                data[i * n + j] = (row[j] as f64 * inv * g[j] as f64) as f32;
            }
        }
        let needs = self.needs(a) || self.needs(gain);
        Ok(self.push(
            Op::RmsNorm { a, gain, eps: EPS },
            Tensor::new(vec![m, n], data).expect("rms_norm shape"),
            needs,
            None,
        ))
    }

    /// Row lookup: table[V,d] indexed by token ids -> [len(ids), d].
    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId, TensorError> {
        let (rows, d) = self.value(table).dims2("embedding")?;
        let src = &self.value(table).data;
        let mut data = vec![0.0f32; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            let id_us = id as usize;
            if id_us >= rows {
                return Err(TensorError::IdOutOfRange { id, rows });
            }
            data[i * d..(i + 1) * d].copy_from_slice(&src[id_us * d..(id_us + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            Tensor::new(vec![ids.len(), d], data).expect("embedding shape"),
            needs,
            None,
        ))
    }

    /// Relative-position bias lookup: out[i,j] = table[buckets[i*cols+j], head].
    pub fn rel_bias(
        &mut self,
        table: NodeId,
        buckets: Arc<Vec<u16>>,
        head: usize,
        rows: usize,
        cols: usize,
    ) -> Result<NodeId, TensorError> {
        let (n_buckets, n_heads) = self.value(table).dims2("rel_bias")?;
        if head >= n_heads {
            return Err(TensorError::HeadOutOfRange {
                head,
                heads: n_heads,
            });
        }
        debug_assert_eq!(buckets.len(), rows * cols);
        let src = &self.value(table).data;
        let mut data = vec![0.0f32; rows * cols];
        for (i, &b) in buckets.iter().enumerate() {
            debug_assert!((b as usize) < n_buckets);
            data[i] = src[b as usize * n_heads + head];
        }
        let needs = self.needs(table);
        Ok(self.push(
            Op::RelBias {
                table,
                buckets,
                head,
            },
            Tensor::new(vec![rows, cols], data).expect("rel_bias shape"),
            needs,
            None,
        ))
    }

    /// Contiguous column slice of a matrix: [m,n] -> [m,len].
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let (m, n) = self.value(a).dims2("slice_cols")?;
        if start + len > n {
            return Err(TensorError::SliceBounds {
                start,
                end: start + len,
                cols: n,
            });
        }
        let src = &self.value(a).data;
        let mut data = vec![0.0f32; m * len];
        for i in 0..m {
            data[i * len..(i + 1) * len].copy_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Op::SliceCols { a, start, len },
            Tensor::new(vec![m, len], data).expect("slice shape"),
            needs,
            None,
        ))
    }

    /// Concatenate matrices along columns; inverse of per-head slicing.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::ConcatEmpty);
        }
        let (m, _) = self.value(parts[0]).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != m {
                return Err(TensorError::ConcatRows(m, r));
            }
            widths.push(c);
            total += c;
        }
        let mut data = vec![0.0f32; m * total];
        let mut offset = 0;
        for (idx, &p) in parts.iter().enumerate() {
            let w = widths[idx];
            let src = &self.value(p).data;
            for i in 0..m {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            Tensor::new(vec![m, total], data).expect("concat shape"),
            needs,
            None,
        ))
    }

    /// Mean negative log-likelihood over positions whose target != ignore id,
    /// with log-sum-exp stabilization.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        ignore: u32,
    ) -> Result<NodeId, TensorError> {
        let (t, v) = self.value(logits).dims2("cross_entropy")?;
        if t != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![t, v],
                rhs: vec![targets.len()],
            });
        }
        let src = &self.value(logits).data;
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (i, &tgt) in targets.iter().enumerate() {
            if tgt == ignore {
                continue;
            }
            if tgt as usize >= v {
                return Err(TensorError::TargetOutOfRange { id: tgt, vocab: v });
            }
            let row = &src[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut sum = 0.0f64;
            for &x in row {
                sum += ((x as f64) - max).exp();
            }
            let logprob = (row[tgt as usize] as f64 - max) - sum.ln();
            total -= logprob;
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::AllIgnored(targets.len()));
        }
        let mean = total / count as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
            },
            Tensor::scalar(mean as f32),
            needs,
            Some(mean),
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data.iter().map(|&x| x as f64).sum();
        let needs = self.needs(a);
        self.push(Op::Sum { a }, Tensor::scalar(s as f32), needs, Some(s))
    }

    /// Reverse sweep from a scalar loss node. Gradients over fan-out
    /// accumulate by summation; returns f32 gradients for every
    /// requires_grad leaf.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.value(loss).shape.clone()));
        }
        let mut bufs: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        bufs[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let grad = match bufs[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &grad, &mut bufs);
            // Keep leaf grads for extraction, drop intermediates.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                bufs[idx] = Some(grad);
            }
        }

        let mut out: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (idx, buf) in bufs.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (&buf, &self.nodes[idx].op) {
                if self.nodes[idx].value.requires_grad {
                    out[idx] = Some(g.iter().map(|&x| x as f32).collect());
                }
            }
        }
        Ok(Gradients { by_node: out })
    }

    fn accumulate(bufs: &mut [Option<Vec<f64>>], target: usize, len: usize) -> &mut Vec<f64> {
        bufs[target].get_or_insert_with(|| vec![0.0; len])
    }

    fn propagate(&self, idx: usize, grad: &[f64], bufs: &mut [Option<Vec<f64>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                let n = self.value(*b).shape[1];
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                if self.needs(*a) {
                    let da = Self::accumulate(bufs, a.0, m * k);
                    // dA[i,l] += sum_j dC[i,j] * B[l,j]
                    for i in 0..m {
                        for l in 0..k {
                            let mut s = 0.0f64;
                            let brow = &bv[l * n..(l + 1) * n];
                            let grow = &grad[i * n..(i + 1) * n];
                            for j in 0..n {
                                s += grow[j] * brow[j] as f64;
                            }
                            da[i * k + l] += s;
                        }
                    }
                }
                if self.needs(*b) {
                    let db = Self::accumulate(bufs, b.0, k * n);
                    // dB[l,j] += sum_i A[i,l] * dC[i,j]
                    for i in 0..m {
                        let arow = &av[i * k..(i + 1) * k];
                        let grow = &grad[i * n..(i + 1) * n];
                        for (l, &ail) in arow.iter().enumerate() {
                            if ail == 0.0 {
                                continue;
                            }
                            let ail = ail as f64;
                            let drow = &mut db[l * n..(l + 1) * n];
                            for j in 0..n {
                                drow[j] += ail * grow[j];
                            }
                        }
                    }
                }
            }
            Op::MatMulNt { a, b } => {
                // C = A @ B^T with A[m,k], B[n,k].
                let (m, k) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                let n = self.value(*b).shape[0];
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                if self.needs(*a) {
                    let da = Self::accumulate(bufs, a.0, m * k);
                    // dA[i,p] += sum_j dC[i,j] * B[j,p]
                    for i in 0..m {
                        let grow = &grad[i * n..(i + 1) * n];
                        let darow = &mut da[i * k..(i + 1) * k];
                        for (j, &g) in grow.iter().enumerate() {
                            if g == 0.0 {
                                continue;
                            }
                            let brow = &bv[j * k..(j + 1) * k];
                            for p in 0..k {
                                darow[p] += g * brow[p] as f64;
                            }
                        }
                    }
                }
                if self.needs(*b) {
                    let db = Self::accumulate(bufs, b.0, n * k);
                    // dB[j,p] += sum_i dC[i,j] * A[i,p]
                    for i in 0..m {
                        let grow = &grad[i * n..(i + 1) * n];
                        let arow = &av[i * k..(i + 1) * k];
                        for (j, &g) in grow.iter().enumerate() {
                            if g == 0.0 {
                                continue;
                            }
                            let drow = &mut db[j * k..(j + 1) * k];
                            for p in 0..k {
                                drow[p] += g * arow[p] as f64;
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for &src in &[a, b] {
                    if self.needs(*src) {
                        let d = Self::accumulate(bufs, src.0, grad.len());
                        for (x, g) in d.iter_mut().zip(grad) {
                            *x += g;
                        }
                    }
                }
            }
            Op::AddRow { a, row } => {
                let (m, n) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                if self.needs(*a) {
                    let d = Self::accumulate(bufs, a.0, m * n);
                    for (x, g) in d.iter_mut().zip(grad) {
                        *x += g;
                    }
                }
                if self.needs(*row) {
                    let d = Self::accumulate(bufs, row.0, n);
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += grad[i * n + j];
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bv = &self.value(*b).data;
                    let d = Self::accumulate(bufs, a.0, grad.len());
                    for i in 0..grad.len() {
                        d[i] += grad[i] * bv[i] as f64;
                    }
                }
                if self.needs(*b) {
                    let av = &self.value(*a).data;
                    let d = Self::accumulate(bufs, b.0, grad.len());
                    for i in 0..grad.len() {
                        d[i] += grad[i] * av[i] as f64;
                    }
                }
            }
            Op::Scale { a, c } => {
                if self.needs(*a) {
                    let c = *c as f64;
                    let d = Self::accumulate(bufs, a.0, grad.len());
                    for (x, g) in d.iter_mut().zip(grad) {
                        *x += g * c;
                    }
                }
            }
            Op::Relu { a } => {
                if self.needs(*a) {
                    let av = &self.value(*a).data;
                    let d = Self::accumulate(bufs, a.0, grad.len());
                    for i in 0..grad.len() {
                        if av[i] > 0.0 {
                            d[i] += grad[i];
                        }
                    }
                }
            }
            Op::SoftmaxRows { a } => {
                if self.needs(*a) {
                    let y = &self.nodes[idx].value;
                    let (m, n) = (y.shape[0], y.shape[1]);
                    let yv = &y.data;
                    let d = Self::accumulate(bufs, a.0, m * n);
                    for i in 0..m {
                        let yrow = &yv[i * n..(i + 1) * n];
                        let grow = &grad[i * n..(i + 1) * n];
                        let mut dot = 0.0f64;
                        for j in 0..n {
                            dot += grow[j] * yrow[j] as f64;
                        }
                        let drow = &mut d[i * n..(i + 1) * n];
                        for j in 0..n {
                            drow[j] += (grow[j] - dot) * yrow[j] as f64;
                        }
                    }
                }
            }
            Op::RmsNorm { a, gain, eps } => {
                let x = &self.value(*a).data;
                let g = &self.value(*gain).data;
                let (m, n) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                let eps = *eps as f64;
                // Recompute per-row inverse rms in f64.
                let mut invs = vec![0.0f64; m];
                for i in 0..m {
                    let mut ss = 0.0f64;
                    for j in 0..n {
                        let xv = x[i * n + j] as f64;
                        ss += xv * xv;
                    }
                    invs[i] = 1.0 / (ss / n as f64 + eps).sqrt();
                }
                if self.needs(*a) {
                    let d = Self::accumulate(bufs, a.0, m * n);
                    for i in 0..m {
                        let inv = invs[i];
                        let mut dot = 0.0f64;
                        for j in 0..n {
                            dot += grad[i * n + j] * g[j] as f64 * x[i * n + j] as f64;
                        }
                        let coef = inv * inv * inv * dot / n as f64;
                        for j in 0..n {
                            d[i * n + j] +=
                                grad[i * n + j] * g[j] as f64 * inv - coef * x[i * n + j] as f64;
                        }
                    }
                }
                if self.needs(*gain) {
                    let d = Self::accumulate(bufs, gain.0, n);
                    for i in 0..m {
                        let inv = invs[i];
                        for j in 0..n {
                            d[j] += grad[i * n + j] * x[i * n + j] as f64 * inv;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.needs(*table) {
                    let d_model = self.value(*table).shape[1];
                    let rows = self.value(*table).shape[0];
                    let d = Self::accumulate(bufs, table.0, rows * d_model);
                    for (i, &id) in ids.iter().enumerate() {
                        let base = id as usize * d_model;
                        for j in 0..d_model {
                            d[base + j] += grad[i * d_model + j];
                        }
                    }
                }
            }
            Op::RelBias {
                table,
                buckets,
                head,
            } => {
                if self.needs(*table) {
                    let n_heads = self.value(*table).shape[1];
                    let rows = self.value(*table).shape[0];
                    let d = Self::accumulate(bufs, table.0, rows * n_heads);
                    for (i, &b) in buckets.iter().enumerate() {
                        d[b as usize * n_heads + head] += grad[i];
                    }
                }
            }
            Op::SliceCols { a, start, len } => {
                if self.needs(*a) {
                    let (m, n) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                    let d = Self::accumulate(bufs, a.0, m * n);
                    for i in 0..m {
                        for j in 0..*len {
                            d[i * n + start + j] += grad[i * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total = self.nodes[idx].value.shape[1];
                let m = self.nodes[idx].value.shape[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape[1];
                    if self.needs(p) {
                        let d = Self::accumulate(bufs, p.0, m * w);
                        for i in 0..m {
                            for j in 0..w {
                                d[i * w + j] += grad[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
            } => {
                if self.needs(*logits) {
                    let (t, v) = (self.value(*logits).shape[0], self.value(*logits).shape[1]);
                    let src = &self.value(*logits).data;
                    let count = targets.iter().filter(|&&x| x != *ignore).count() as f64;
                    let upstream = grad[0];
                    let d = Self::accumulate(bufs, logits.0, t * v);
                    for (i, &tgt) in targets.iter().enumerate() {
                        if tgt == *ignore {
                            continue;
                        }
                        let row = &src[i * v..(i + 1) * v];
                        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                        let mut sum = 0.0f64;
                        for &x in row {
                            sum += ((x as f64) - max).exp();
                        }
                        let drow = &mut d[i * v..(i + 1) * v];
                        for j in 0..v {
                            let p = ((row[j] as f64) - max).exp() / sum;
                            let onehot = if j == tgt as usize { 1.0 } else { 0.0 };
                            drow[j] += upstream * (p - onehot) / count;
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if self.needs(*a) {
                    let len = self.value(*a).numel();
                    let d = Self::accumulate(bufs, a.0, len);
                    for x in d.iter_mut() {
                        *x += grad[0];
                    }
                }
            }
        }
    }
}

/// Per-leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f32]> {
        self.by_node
            .get(id.index())
            .and_then(|g| g.as_deref())
    }
}

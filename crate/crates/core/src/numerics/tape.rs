//! Reverse-mode automatic differentiation over a per-forward tape.
//!
//! A [`Graph`] records every operation of one forward pass. Values are
//! immutable once recorded. [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients into the trainable parameters of a [`ParamStore`].
//! Nodes that do not depend on any trainable parameter are never visited.

use std::ops::Range;
use std::sync::Arc;

use super::tensor::{mm, mm_nt, mm_tn, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRowVector { x: NodeId, v: NodeId, rows: Range<usize> },
    AddRows { x: NodeId, delta: NodeId, start: usize },
    Gelu(NodeId),
    Silu(NodeId),
    Square(NodeId),
    LayerNorm { x: NodeId, scale: NodeId, shift: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    SoftmaxMasked { x: NodeId, mask: Arc<Tensor> },
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    GatherRows { x: NodeId, index: Vec<usize> },
    Rope { x: NodeId, table: Arc<RopeTable> },
    Sum(NodeId),
    Mean(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-row rotation angles for rotary embedding, shared by q and k.
#[derive(Debug, Clone)]
pub struct RopeTable {
    /// `(cos, sin)` per row and channel pair; `None` rows are left untouched.
    pub(crate) rows: Vec<Option<Vec<(f64, f64)>>>,
    /// Width of one rotated block (the head dimension).
    pub(crate) block: usize,
}

impl RopeTable {
    /// Builds the table for rows carrying `positions` (or `None` for unrotated
    /// rows), rotating each `block`-wide slice of the row independently.
    pub fn new(positions: &[Option<usize>], block: usize, theta_base: f64) -> Result<Self> {
        if !block.is_multiple_of(2) {
            return Err(Error::Config(format!("rotary block width {block} must be even")));
        }
        let rows = positions
            .iter()
            .map(|p| {
                p.map(|index| {
                    (0..block / 2)
                        .map(|i| {
                            let angle = index as f64 * rope_frequency(i, block, theta_base);
                            (angle.cos(), angle.sin())
                        })
                        .collect()
                })
            })
            .collect();
        Ok(RopeTable { rows, block })
    }
}

/// Angular frequency of channel pair `pair` for a rotation of width `dim`.
pub(crate) fn rope_frequency(pair: usize, dim: usize, theta_base: f64) -> f64 {
    theta_base.powf(-2.0 * pair as f64 / dim as f64)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise softmax over unmasked entries only. Masked entries are exactly 0.
pub fn softmax_masked_rows(logits: &[f64], mask: &[f64], cols: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; logits.len()];
    for (r, (lrow, mrow)) in logits.chunks(cols).zip(mask.chunks(cols)).enumerate() {
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut max = f64::NEG_INFINITY;
        for (&l, &m) in lrow.iter().zip(mrow) {
            if m != f64::NEG_INFINITY && l > max {
                max = l;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: r });
        }
        let mut sum = 0.0;
        for ((o, &l), &m) in orow.iter_mut().zip(lrow).zip(mrow) {
            if m != f64::NEG_INFINITY {
                *o = (l - max).exp();
                sum += *o;
            }
        }
        let inv = 1.0 / sum;
        for (o, &m) in orow.iter_mut().zip(mrow) {
            if m != f64::NEG_INFINITY {
                *o *= inv;
            }
        }
    }
    Ok(out)
}

fn rope_apply(data: &mut [f64], cols: usize, table: &RopeTable, inverse: bool) {
    for (row, angles) in data.chunks_mut(cols).zip(&table.rows) {
        let Some(angles) = angles else { continue };
        for block in row.chunks_mut(table.block) {
            for (pair, &(c, s)) in block.chunks_mut(2).zip(angles) {
                let s = if inverse { -s } else { s };
                let (a, b) = (pair[0], pair[1]);
                pair[0] = a * c - b * s;
                pair[1] = a * s + b * c;
            }
        }
    }
}

#[derive(Default)]
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        let t = &self.nodes[id.0].value;
        (t.rows(), t.cols())
    }

    fn check_finite(&self, t: &Tensor, op: &'static str) -> Result<()> {
        if t.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let p = store.get(id);
        self.nodes.push(Node { value: p.tensor.clone(), op: Op::Param(id), requires_grad: p.trainable });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Dimension(format!("matmul {m}x{k} · {k2}x{n}")));
        }
        let data = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::matrix(m, n, data)?;
        self.check_finite(&t, "matmul")?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::Dimension(format!("matmul_nt {m}x{k} · ({n}x{k2})ᵀ")));
        }
        let data = mm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::matrix(m, n, data)?;
        self.check_finite(&t, "matmul_nt")?;
        Ok(self.push(t, Op::MatMulNT(a, b), &[a, b]))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y);
        self.check_finite(&t, "add")?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y);
        self.check_finite(&t, "sub")?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_with(a, b, |x, y| x * y);
        self.check_finite(&t, "mul")?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * s).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.check_finite(&t, "scale")?;
        Ok(self.push(t, Op::Scale(a, s), &[a]))
    }

    /// Adds the vector `v` (length = cols) to every row of `x`.
    pub fn add_row_vector(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let rows = self.dims(x).0;
        self.add_row_vector_range(x, v, 0..rows)
    }

    /// Adds the vector `v` to rows `rows` of `x`; other rows pass through.
    pub fn add_row_vector_range(&mut self, x: NodeId, v: NodeId, rows: Range<usize>) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if self.value(v).numel() != c || rows.end > r || rows.start > rows.end {
            return Err(Error::Dimension(format!(
                "add_row_vector: {r}x{c} with vector of {} over rows {rows:?}",
                self.value(v).numel()
            )));
        }
        let mut t = self.value(x).clone();
        let vd = self.value(v).data().to_vec();
        for row in rows.clone() {
            t.data_mut()[row * c..(row + 1) * c].iter_mut().zip(&vd).for_each(|(a, b)| *a += b);
        }
        self.check_finite(&t, "add_row_vector")?;
        Ok(self.push(t, Op::AddRowVector { x, v, rows }, &[x, v]))
    }

    /// Adds `delta [k×c]` into rows `start..start+k` of `x [r×c]`.
    pub fn add_rows(&mut self, x: NodeId, delta: NodeId, start: usize) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        let (k, c2) = self.dims(delta);
        if c != c2 || start + k > r {
            return Err(Error::Dimension(format!("add_rows: {k}x{c2} into {r}x{c} at row {start}")));
        }
        let mut t = self.value(x).clone();
        let dd = self.value(delta).data();
        t.data_mut()[start * c..(start + k) * c].iter_mut().zip(dd).for_each(|(a, b)| *a += b);
        self.check_finite(&t, "add_rows")?;
        Ok(self.push(t, Op::AddRows { x, delta, start }, &[x, delta]))
    }

    fn map(&mut self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect()).expect("shape preserved")
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.map(a, gelu);
        self.check_finite(&t, "gelu")?;
        Ok(self.push(t, Op::Gelu(a), &[a]))
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.map(a, |x| x * sigmoid(x));
        self.check_finite(&t, "silu")?;
        Ok(self.push(t, Op::Silu(a), &[a]))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.map(a, |x| x * x);
        self.check_finite(&t, "square")?;
        Ok(self.push(t, Op::Square(a), &[a]))
    }

    /// Per-row normalization to zero mean and unit variance followed by an
    /// affine map with `scale` and `shift` (both of length = cols).
    pub fn layer_norm(&mut self, x: NodeId, scale: NodeId, shift: NodeId, eps: f64) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if self.value(scale).numel() != c || self.value(shift).numel() != c {
            return Err(Error::Dimension(format!("layer_norm affine params must have {c} entries")));
        }
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let xv = self.value(x).data();
        let g = self.value(scale).data();
        let b = self.value(shift).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.check_finite(&t, "layer_norm")?;
        Ok(self.push(t, Op::LayerNorm { x, scale, shift, xhat, rstd }, &[x, scale, shift]))
    }

    /// Softmax over each row of `x`, excluding entries where `mask` is −∞.
    /// Mask entries must be exactly 0 or −∞.
    pub fn softmax_masked(&mut self, x: NodeId, mask: Arc<Tensor>) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if mask.rows() != r || mask.cols() != c {
            return Err(Error::Dimension(format!(
                "mask {}x{} does not match logits {r}x{c}",
                mask.rows(),
                mask.cols()
            )));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != f64::NEG_INFINITY) {
            return Err(Error::Contract("mask entries must be 0 or -inf".into()));
        }
        let data = softmax_masked_rows(self.value(x).data(), mask.data(), c)?;
        let t = Tensor::matrix(r, c, data)?;
        self.check_finite(&t, "softmax_masked")?;
        Ok(self.push(t, Op::SoftmaxMasked { x, mask }, &[x]))
    }

    pub fn slice_rows(&mut self, x: NodeId, range: Range<usize>) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if range.end > r || range.start >= range.end {
            return Err(Error::Dimension(format!("slice_rows {range:?} of {r} rows")));
        }
        let data = self.value(x).data()[range.start * c..range.end * c].to_vec();
        let t = Tensor::matrix(range.len(), c, data)?;
        Ok(self.push(t, Op::SliceRows { x, start: range.start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: NodeId, range: Range<usize>) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if range.end > c || range.start >= range.end {
            return Err(Error::Dimension(format!("slice_cols {range:?} of {c} cols")));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(r * range.len());
        for i in 0..r {
            data.extend_from_slice(&xv[i * c + range.start..i * c + range.end]);
        }
        let t = Tensor::matrix(r, range.len(), data)?;
        Ok(self.push(t, Op::SliceCols { x, start: range.start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let c = self.dims(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c2) = self.dims(p);
            if c2 != c {
                return Err(Error::Dimension(format!("concat_rows: {c2} cols vs {c}")));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let t = Tensor::matrix(rows, c, data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let r = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != r) {
            return Err(Error::Dimension("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::matrix(r, total, data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn gather_rows(&mut self, x: NodeId, index: &[usize]) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(Error::Dimension(format!("gather row {i} of {r}")));
            }
            data.extend_from_slice(self.value(x).row(i));
        }
        let t = Tensor::matrix(index.len(), c, data)?;
        Ok(self.push(t, Op::GatherRows { x, index: index.to_vec() }, &[x]))
    }

    /// Rotates channel pairs of each row by its table angles.
    pub fn rope(&mut self, x: NodeId, table: Arc<RopeTable>) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if table.rows.len() != r || c % table.block != 0 {
            return Err(Error::Dimension(format!(
                "rope table for {} rows / block {} applied to {r}x{c}",
                table.rows.len(),
                table.block
            )));
        }
        let mut t = self.value(x).clone();
        rope_apply(t.data_mut(), c, &table, false);
        Ok(self.push(t, Op::Rope { x, table }, &[x]))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), &[a]))
    }

    /// Mean squared error between two same-shape nodes.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let diff = self.sub(pred, target)?;
        let sq = self.square(diff)?;
        self.mean(sq)
    }

    /// Back-propagates from the scalar `loss` and accumulates gradients into
    /// the trainable parameters of `store`.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads, store)?;
        }
        Ok(())
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
    ) -> Result<()> {
        let mut acc = |id: NodeId, delta: Vec<f64>| {
            if !self.rg(id) {
                return;
            }
            match &mut grads[id.0] {
                Some(buf) => buf.iter_mut().zip(&delta).for_each(|(b, d)| *b += d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(pid) => store.accumulate_grad(*pid, g),
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.rg(*a) {
                    acc(*a, mm_nt(g, self.value(*b).data(), m, n, k));
                }
                if self.rg(*b) {
                    acc(*b, mm_tn(self.value(*a).data(), g, m, k, n));
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                if self.rg(*a) {
                    acc(*a, mm(g, self.value(*b).data(), m, n, k));
                }
                if self.rg(*b) {
                    acc(*b, mm_tn(g, self.value(*a).data(), m, n, k));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                if self.rg(*a) {
                    acc(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if self.rg(*b) {
                    acc(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|v| v * s).collect()),
            Op::AddRowVector { x, v, rows } => {
                acc(*x, g.to_vec());
                if self.rg(*v) {
                    let c = self.dims(*x).1;
                    let mut gv = vec![0.0; c];
                    for row in rows.clone() {
                        gv.iter_mut().zip(&g[row * c..(row + 1) * c]).for_each(|(a, b)| *a += b);
                    }
                    acc(*v, gv);
                }
            }
            Op::AddRows { x, delta, start } => {
                acc(*x, g.to_vec());
                let c = self.dims(*x).1;
                let k = self.dims(*delta).0;
                acc(*delta, g[start * c..(start + k) * c].to_vec());
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                acc(*a, g.iter().zip(va).map(|(g, &x)| g * gelu_grad(x)).collect());
            }
            Op::Silu(a) => {
                let va = self.value(*a).data();
                acc(
                    *a,
                    g.iter()
                        .zip(va)
                        .map(|(g, &x)| {
                            let s = sigmoid(x);
                            g * (s + x * s * (1.0 - s))
                        })
                        .collect(),
                );
            }
            Op::Square(a) => {
                let va = self.value(*a).data();
                acc(*a, g.iter().zip(va).map(|(g, x)| 2.0 * g * x).collect());
            }
            Op::LayerNorm { x, scale, shift, xhat, rstd } => {
                let (r, c) = self.dims(*x);
                let gamma = self.value(*scale).data();
                if self.rg(*x) {
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        let gi = &g[i * c..(i + 1) * c];
                        let hi = &xhat[i * c..(i + 1) * c];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..c {
                            let d = gi[j] * gamma[j];
                            mean_d += d;
                            mean_dh += d * hi[j];
                        }
                        mean_d /= c as f64;
                        mean_dh /= c as f64;
                        for j in 0..c {
                            let d = gi[j] * gamma[j];
                            gx[i * c + j] = rstd[i] * (d - mean_d - hi[j] * mean_dh);
                        }
                    }
                    acc(*x, gx);
                }
                if self.rg(*scale) {
                    let mut gs = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            gs[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                    acc(*scale, gs);
                }
                if self.rg(*shift) {
                    let mut gb = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                    acc(*shift, gb);
                }
            }
            Op::SoftmaxMasked { x, mask } => {
                let c = self.dims(*x).1;
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for ((gxr, yr), (gr, mr)) in
                    gx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c).zip(mask.data().chunks(c)))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        if mr[j] != f64::NEG_INFINITY {
                            gxr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::SliceRows { x, start } => {
                let (r, c) = self.dims(*x);
                let mut gx = vec![0.0; r * c];
                gx[start * c..start * c + g.len()].copy_from_slice(g);
                acc(*x, gx);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.dims(*x);
                let w = node.value.cols();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                acc(*x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc(p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let r = node.value.rows();
                let mut col = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            gp.extend_from_slice(&g[i * total + col..i * total + col + w]);
                        }
                        acc(p, gp);
                    }
                    col += w;
                }
            }
            Op::GatherRows { x, index } => {
                let (r, c) = self.dims(*x);
                let mut gx = vec![0.0; r * c];
                for (k, &i) in index.iter().enumerate() {
                    gx[i * c..(i + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]).for_each(|(a, b)| *a += b);
                }
                acc(*x, gx);
            }
            Op::Rope { x, table } => {
                let c = self.dims(*x).1;
                let mut gx = g.to_vec();
                rope_apply(&mut gx, c, table, true);
                acc(*x, gx);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                acc(*a, vec![g[0] / n as f64; n]);
            }
        }
        Ok(())
    }
}

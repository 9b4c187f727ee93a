//! Dense `f64` tensors with a tape for reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node. Leaves are created with
//! [`Graph::param`] (tracked) or [`Graph::constant`]; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients into tracked leaves.
//! Matrices are row-major; "rows" of an n-d tensor are all leading axes
//! flattened, "cols" is the last axis.

use std::io::{Read, Write};
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::io::create_writer;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    RowMul(Var, Var),
    Tanh(Var),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    Sum { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    SumAll(Var),
    Scale(Var, f64),
    Gather { table: Var, ids: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Dropout { x: Var, mask: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    MaskedFill { x: Var, mask: Vec<bool> },
    Transpose(Var),
    Reshape(Var),
    SegmentSum { x: Var, offsets: Vec<usize> },
    RowScale { x: Var, coeffs: Vec<f64> },
    SegmentSoftmax { x: Var, offsets: Vec<usize> },
    IndexAddRows { base: Var, rows: Var, idx: Vec<usize> },
    SegmentAttention { q: Var, k: Var, v: Var, offsets: Vec<usize>, heads: usize, probs: Vec<Vec<f64>> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// A tape of tensor operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `c = beta * c + op(a) * op(b)` for row-major matrices, where `op`
/// optionally transposes. `m x k` times `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked above against the strides used.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// (outer, axis length, inner) decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_offsets(op: &'static str, offsets: &[usize], total: usize) -> Result<()> {
    let ok = !offsets.is_empty()
        && offsets[0] == 0
        && *offsets.last().unwrap() == total
        && offsets.windows(2).all(|w| w[0] <= w[1]);
    if ok {
        Ok(())
    } else {
        Err(shape_err(op, offsets, &[total]))
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], var: Var, len: usize) -> &mut Vec<f64> {
    adj[var.0].get_or_insert_with(|| vec![0.0; len])
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A tracked leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].value.shape
    }

    /// Accumulated gradient of a tracked leaf, if backward reached it.
    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.nodes[var.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, var: Var) -> Option<Vec<f64>> {
        self.nodes[var.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.value(a).data, false, &self.value(b).data, false, &mut out, 0.0);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), &[a, b]))
    }

    /// Elementwise sum; `b` may omit leading axes of `a` and is broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add", sa, sb));
        }
        let bv = &self.value(b).data;
        let data: Vec<f64> = if bv.is_empty() {
            self.value(a).data.clone()
        } else {
            self.value(a)
                .data
                .chunks(bv.len())
                .flat_map(|chunk| chunk.iter().zip(bv).map(|(x, y)| x + y))
                .collect()
        };
        let shape = sa.to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("mul", sa, sb));
        }
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x * y).collect();
        let shape = sa.to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), &[a, b]))
    }

    /// Scales row `r` of a matrix by `w[r]`, differentiable in both.
    pub fn row_mul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 1 || sx[0] != sw[0] {
            return Err(shape_err("row_mul", sx, sw));
        }
        let value = self.value(x);
        let cols = value.cols();
        let weights = &self.value(w).data;
        let mut data = value.data.clone();
        for (r, row) in data.chunks_mut(cols.max(1)).enumerate() {
            row.iter_mut().for_each(|v| *v *= weights[r]);
        }
        let shape = sx.to_vec();
        Ok(self.push(Tensor { shape, data }, Op::RowMul(x, w), &[x, w]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x);
        let data = value.data.iter().map(|&v| f(v)).collect();
        let shape = value.shape.clone();
        self.push(Tensor { shape, data }, op, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", &shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let input = &self.value(x).data;
        let mut data = vec![0.0; input.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| input[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (input[at(j)] - max).exp();
                    data[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    data[at(j)] /= total;
                }
            }
        }
        Ok(self.push(Tensor { shape, data }, Op::Softmax { x, axis }, &[x]))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err(if mean { "mean" } else { "sum" }, &shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let input = &self.value(x).data;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &input[o * len * inner + j * inner..][..inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            data.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let op = if mean { Op::Mean { x, axis } } else { Op::Sum { x, axis } };
        Ok(self.push(Tensor { shape: out_shape, data }, op, &[x]))
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(total), Op::SumAll(x), &[x])
    }

    /// Rows of a 2-d table selected by id.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(shape_err("embedding_gather", shape, &[]));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(shape_err("embedding_gather", shape, &[bad]));
        }
        let src = &self.value(table).data;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            data.extend_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        let out = Tensor { shape: vec![ids.len(), cols], data };
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| shape_err("concat", &[], &[]))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                data.extend_from_slice(&self.value(x).data[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(Tensor { shape, data }, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    /// Inverted dropout. Identity when not training or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let value = self.value(x);
        let mask: Vec<f64> = (0..value.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = value.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = value.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Dropout { x, mask }, &[x]))
    }

    /// Layer normalization over the last axis with gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let value = self.value(x);
        let cols = value.cols();
        for g in [gamma, beta] {
            if self.shape(g) != [cols] {
                return Err(shape_err("layer_norm", &value.shape, self.shape(g)));
            }
        }
        let (gv, bv) = (&self.value(gamma).data, &self.value(beta).data);
        let rows = value.rows();
        let mut xhat = vec![0.0; value.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; value.numel()];
        for r in 0..rows {
            let row = value.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                data[r * cols + c] = h * gv[c] + bv[c];
            }
        }
        let shape = value.shape.clone();
        let op = Op::LayerNorm { x, gamma, beta, xhat, inv_std };
        Ok(self.push(Tensor { shape, data }, op, &[x, gamma, beta]))
    }

    /// Replaces masked positions with `fill`; they receive no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], fill: f64) -> Result<Var> {
        let value = self.value(x);
        if mask.len() != value.numel() {
            return Err(shape_err("masked_fill", &value.shape, &[mask.len()]));
        }
        let data = value.data.iter().zip(mask).map(|(&v, &m)| if m { fill } else { v }).collect();
        let shape = value.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::MaskedFill { x, mask: mask.to_vec() }, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 {
            return Err(shape_err("transpose", shape, &[]));
        }
        let (r, c) = (shape[0], shape[1]);
        let src = &self.value(x).data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor { shape: vec![c, r], data }, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x);
        if shape.iter().product::<usize>() != value.numel() {
            return Err(shape_err("reshape", &value.shape, shape));
        }
        let out = Tensor { shape: shape.to_vec(), data: value.data.clone() };
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Sums consecutive row ranges `offsets[s]..offsets[s+1]` of a matrix.
    /// Empty ranges produce zero rows.
    pub fn segment_sum(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let value = self.value(x);
        if value.shape.len() != 2 {
            return Err(shape_err("segment_sum", &value.shape, offsets));
        }
        check_offsets("segment_sum", offsets, value.rows())?;
        let cols = value.cols();
        let segments = offsets.len() - 1;
        let mut data = vec![0.0; segments * cols];
        for s in 0..segments {
            let out = &mut data[s * cols..(s + 1) * cols];
            for r in offsets[s]..offsets[s + 1] {
                for (o, v) in out.iter_mut().zip(value.row(r)) {
                    *o += v;
                }
            }
        }
        let op = Op::SegmentSum { x, offsets: offsets.to_vec() };
        Ok(self.push(Tensor { shape: vec![segments, cols], data }, op, &[x]))
    }

    /// Scales each row by a constant coefficient.
    pub fn row_scale(&mut self, x: Var, coeffs: &[f64]) -> Result<Var> {
        let value = self.value(x);
        if value.shape.len() != 2 || value.rows() != coeffs.len() {
            return Err(shape_err("row_scale", &value.shape, &[coeffs.len()]));
        }
        let cols = value.cols();
        let mut data = value.data.clone();
        for (row, c) in data.chunks_mut(cols.max(1)).zip(coeffs) {
            row.iter_mut().for_each(|v| *v *= c);
        }
        let shape = value.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::RowScale { x, coeffs: coeffs.to_vec() }, &[x]))
    }

    /// Softmax of a vector within each segment independently.
    pub fn segment_softmax(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let value = self.value(x);
        if value.shape.len() != 1 {
            return Err(shape_err("segment_softmax", &value.shape, offsets));
        }
        check_offsets("segment_softmax", offsets, value.numel())?;
        let mut data = value.data.clone();
        for w in offsets.windows(2) {
            let seg = &mut data[w[0]..w[1]];
            let max = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in seg.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            seg.iter_mut().for_each(|v| *v /= total);
        }
        let shape = value.shape.clone();
        let op = Op::SegmentSoftmax { x, offsets: offsets.to_vec() };
        Ok(self.push(Tensor { shape, data }, op, &[x]))
    }

    /// Copy of `base` with `rows[j]` added onto row `idx[j]`.
    pub fn index_add_rows(&mut self, base: Var, rows: Var, idx: &[usize]) -> Result<Var> {
        let (sb, sr) = (self.shape(base), self.shape(rows));
        if sb.len() != 2 || sr.len() != 2 || sb[1] != sr[1] || sr[0] != idx.len() || idx.iter().any(|&i| i >= sb[0]) {
            return Err(shape_err("index_add_rows", sb, sr));
        }
        let cols = sb[1];
        let mut data = self.value(base).data.clone();
        let src = self.value(rows);
        for (j, &target) in idx.iter().enumerate() {
            for (d, s) in data[target * cols..(target + 1) * cols].iter_mut().zip(src.row(j)) {
                *d += s;
            }
        }
        let shape = sb.to_vec();
        let op = Op::IndexAddRows { base, rows, idx: idx.to_vec() };
        Ok(self.push(Tensor { shape, data }, op, &[base, rows]))
    }

    /// Multi-head scaled dot-product self-attention applied independently to
    /// each row segment of packed `[T, C]` query/key/value matrices.
    pub fn segment_attention(&mut self, q: Var, k: Var, v: Var, offsets: &[usize], heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 2 || self.shape(k) != shape || self.shape(v) != shape {
            return Err(shape_err("segment_attention", &shape, self.shape(k)));
        }
        let (total, cols) = (shape[0], shape[1]);
        if heads == 0 || cols % heads != 0 {
            return Err(shape_err("segment_attention", &shape, &[heads]));
        }
        check_offsets("segment_attention", offsets, total)?;
        let dh = cols / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (&self.value(q).data, &self.value(k).data, &self.value(v).data);
        let mut data = vec![0.0; total * cols];
        let mut probs = Vec::with_capacity((offsets.len() - 1) * heads);
        for w in offsets.windows(2) {
            let (start, n) = (w[0], w[1] - w[0]);
            for h in 0..heads {
                let mut p = vec![0.0; n * n];
                for i in 0..n {
                    let qi = &qv[(start + i) * cols + h * dh..][..dh];
                    let row = &mut p[i * n..(i + 1) * n];
                    for (j, slot) in row.iter_mut().enumerate() {
                        let kj = &kv[(start + j) * cols + h * dh..][..dh];
                        *slot = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    row.iter_mut().for_each(|s| *s /= z);
                    let out = &mut data[(start + i) * cols + h * dh..][..dh];
                    for (j, &a) in row.iter().enumerate() {
                        let vj = &vv[(start + j) * cols + h * dh..][..dh];
                        for (o, x) in out.iter_mut().zip(vj) {
                            *o += a * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let op = Op::SegmentAttention { q, k, v, offsets: offsets.to_vec(), heads, probs };
        Ok(self.push(Tensor { shape, data }, op, &[q, k, v]))
    }

    /// Mean negative log-likelihood of `targets[r]` under a row softmax of
    /// `[B, K]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let value = self.value(logits);
        if value.shape.len() != 2 || value.rows() != targets.len() || targets.iter().any(|&t| t >= value.cols()) {
            return Err(shape_err("cross_entropy", &value.shape, &[targets.len()]));
        }
        let (rows, cols) = (value.rows(), value.cols());
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            let row = value.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            for c in 0..cols {
                probs[r * cols + c] = (row[c] - log_z).exp();
            }
            loss += log_z - row[target];
        }
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss / rows as f64), op, &[logits]))
    }

    /// Reverse pass from a scalar. Gradients accumulate into tracked leaves
    /// across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(shape_err("backward", &loss_value.shape, &[]));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for index in (0..=loss.0).rev() {
            let node = &self.nodes[index];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = adj[index].take() else { continue };
            if let Op::Leaf = node.op {
                adj[index] = Some(dy);
                continue;
            }
            self.propagate(index, &dy, &mut adj);
        }
        for (index, slot) in adj.into_iter().enumerate() {
            let node = &mut self.nodes[index];
            if let (Op::Leaf, Some(g)) = (&node.op, slot) {
                match &mut node.grad {
                    Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn numel(&self, var: Var) -> usize {
        self.nodes[var.0].value.numel()
    }

    fn propagate(&self, index: usize, dy: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[index];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
                if self.needs(*a) {
                    let ga = accumulate(adj, *a, m * k);
                    gemm(m, n, k, dy, false, &vb.data, true, ga, 1.0);
                }
                if self.needs(*b) {
                    let gb = accumulate(adj, *b, k * n);
                    gemm(k, m, n, &va.data, true, dy, false, gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    let ga = accumulate(adj, *a, dy.len());
                    ga.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if self.needs(*b) {
                    let nb = self.numel(*b);
                    let gb = accumulate(adj, *b, nb);
                    if nb > 0 {
                        for chunk in dy.chunks(nb) {
                            gb.iter_mut().zip(chunk).for_each(|(g, d)| *g += d);
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                if self.needs(*a) {
                    let ga = accumulate(adj, *a, dy.len());
                    for i in 0..dy.len() {
                        ga[i] += dy[i] * vb[i];
                    }
                }
                if self.needs(*b) {
                    let gb = accumulate(adj, *b, dy.len());
                    for i in 0..dy.len() {
                        gb[i] += dy[i] * va[i];
                    }
                }
            }
            Op::RowMul(x, w) => {
                let (vx, vw) = (self.value(*x), &self.value(*w).data);
                let cols = vx.cols();
                if self.needs(*x) {
                    let gx = accumulate(adj, *x, dy.len());
                    for (i, g) in gx.iter_mut().enumerate() {
                        *g += dy[i] * vw[i / cols];
                    }
                }
                if self.needs(*w) {
                    let gw = accumulate(adj, *w, vw.len());
                    for (r, g) in gw.iter_mut().enumerate() {
                        *g += (0..cols).map(|c| dy[r * cols + c] * vx.data[r * cols + c]).sum::<f64>();
                    }
                }
            }
            Op::Tanh(x) => {
                let gx = accumulate(adj, *x, dy.len());
                for i in 0..dy.len() {
                    gx[i] += dy[i] * (1.0 - out.data[i] * out.data[i]);
                }
            }
            Op::Relu(x) => {
                let vx = &self.value(*x).data;
                let gx = accumulate(adj, *x, dy.len());
                for i in 0..dy.len() {
                    if vx[i] > 0.0 {
                        gx[i] += dy[i];
                    }
                }
            }
            Op::Scale(x, factor) => {
                let gx = accumulate(adj, *x, dy.len());
                gx.iter_mut().zip(dy).for_each(|(g, d)| *g += d * factor);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(&out.shape, *axis);
                let y = &out.data;
                let gx = accumulate(adj, *x, dy.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| dy[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] += y[at(j)] * (dy[at(j)] - dot);
                        }
                    }
                }
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let in_shape = &self.value(*x).shape;
                let (outer, len, inner) = split_axis(in_shape, *axis);
                let factor = if matches!(node.op, Op::Mean { .. }) { 1.0 / len as f64 } else { 1.0 };
                let gx = accumulate(adj, *x, outer * len * inner);
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            gx[o * len * inner + j * inner + i] += dy[o * inner + i] * factor;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                let n = self.numel(*x);
                let gx = accumulate(adj, *x, n);
                gx.iter_mut().for_each(|g| *g += dy[0]);
            }
            Op::Gather { table, ids } => {
                let n = self.numel(*table);
                let cols = out.cols();
                let gt = accumulate(adj, *table, n);
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..cols {
                        gt[id * cols + c] += dy[r * cols + c];
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(&out.shape, *axis);
                let mut at = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if self.needs(x) {
                        let gx = accumulate(adj, x, outer * len * inner);
                        for o in 0..outer {
                            let src = &dy[o * total * inner + at * inner..][..len * inner];
                            gx[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(g, d)| *g += d);
                        }
                    }
                    at += len;
                }
            }
            Op::Dropout { x, mask } => {
                let gx = accumulate(adj, *x, dy.len());
                for i in 0..dy.len() {
                    gx[i] += dy[i] * mask[i];
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let cols = out.cols();
                let rows = out.rows();
                let gv = &self.value(*gamma).data;
                if self.needs(*gamma) {
                    let gg = accumulate(adj, *gamma, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += dy[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if self.needs(*beta) {
                    let gb = accumulate(adj, *beta, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += dy[r * cols + c];
                        }
                    }
                }
                if self.needs(*x) {
                    let gx = accumulate(adj, *x, rows * cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let dyr = &dy[r * cols..(r + 1) * cols];
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let dxhat: Vec<f64> = dyr.iter().zip(gv).map(|(d, g)| d * g).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xh).map(|(d, h)| d * h).sum();
                        for c in 0..cols {
                            gx[r * cols + c] += inv_std[r] / n * (n * dxhat[c] - sum_d - xh[c] * sum_dx);
                        }
                    }
                }
            }
            Op::MaskedFill { x, mask } => {
                let gx = accumulate(adj, *x, dy.len());
                for i in 0..dy.len() {
                    if !mask[i] {
                        gx[i] += dy[i];
                    }
                }
            }
            Op::Transpose(x) => {
                let (c, r) = (out.shape[0], out.shape[1]);
                let gx = accumulate(adj, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += dy[j * r + i];
                    }
                }
            }
            Op::Reshape(x) => {
                let gx = accumulate(adj, *x, dy.len());
                gx.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
            }
            Op::SegmentSum { x, offsets } => {
                let cols = out.cols();
                let n = self.numel(*x);
                let gx = accumulate(adj, *x, n);
                for s in 0..offsets.len() - 1 {
                    let src = &dy[s * cols..(s + 1) * cols];
                    for r in offsets[s]..offsets[s + 1] {
                        gx[r * cols..(r + 1) * cols].iter_mut().zip(src).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::RowScale { x, coeffs } => {
                let cols = out.cols().max(1);
                let gx = accumulate(adj, *x, dy.len());
                for (i, g) in gx.iter_mut().enumerate() {
                    *g += dy[i] * coeffs[i / cols];
                }
            }
            Op::SegmentSoftmax { x, offsets } => {
                let y = &out.data;
                let gx = accumulate(adj, *x, dy.len());
                for w in offsets.windows(2) {
                    let dot: f64 = (w[0]..w[1]).map(|i| dy[i] * y[i]).sum();
                    for i in w[0]..w[1] {
                        gx[i] += y[i] * (dy[i] - dot);
                    }
                }
            }
            Op::IndexAddRows { base, rows, idx } => {
                let cols = out.cols();
                if self.needs(*base) {
                    let gb = accumulate(adj, *base, dy.len());
                    gb.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if self.needs(*rows) {
                    let gr = accumulate(adj, *rows, idx.len() * cols);
                    for (j, &target) in idx.iter().enumerate() {
                        for c in 0..cols {
                            gr[j * cols + c] += dy[target * cols + c];
                        }
                    }
                }
            }
            Op::SegmentAttention { q, k, v, offsets, heads, probs } => {
                let cols = out.cols();
                let dh = cols / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (&self.value(*q).data, &self.value(*k).data, &self.value(*v).data);
                let total = out.rows() * cols;
                let mut gq = vec![0.0; total];
                let mut gk = vec![0.0; total];
                let mut gv = vec![0.0; total];
                let mut slot = 0;
                for w in offsets.windows(2) {
                    let (start, n) = (w[0], w[1] - w[0]);
                    for h in 0..*heads {
                        let p = &probs[slot];
                        slot += 1;
                        let at = |row: usize| (start + row) * cols + h * dh;
                        for i in 0..n {
                            let dyi = &dy[at(i)..at(i) + dh];
                            // dA[i, j] = dy_i . v_j ; dS = A (dA - sum(dA A))
                            let da: Vec<f64> = (0..n)
                                .map(|j| dyi.iter().zip(&vv[at(j)..at(j) + dh]).map(|(a, b)| a * b).sum())
                                .collect();
                            let row = &p[i * n..(i + 1) * n];
                            let dot: f64 = da.iter().zip(row).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                let a = row[j];
                                for c in 0..dh {
                                    gv[at(j) + c] += a * dyi[c];
                                }
                                let ds = a * (da[j] - dot) * scale;
                                if ds != 0.0 {
                                    for c in 0..dh {
                                        gq[at(i) + c] += ds * kv[at(j) + c];
                                        gk[at(j) + c] += ds * qv[at(i) + c];
                                    }
                                }
                            }
                        }
                    }
                }
                for (var, g) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if self.needs(var) {
                        let acc = accumulate(adj, var, total);
                        acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let rows = targets.len();
                let cols = probs.len() / rows.max(1);
                let gl = accumulate(adj, *logits, probs.len());
                let factor = dy[0] / rows as f64;
                for (r, &t) in targets.iter().enumerate() {
                    for c in 0..cols {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        gl[r * cols + c] += factor * (probs[r * cols + c] - onehot);
                    }
                }
            }
        }
    }
}

/// One entry of a checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub tensors: Vec<TensorEntry>,
    pub meta: serde_json::Value,
}

pub const CHECKPOINT_FORMAT: &str = "persona-ckpt-v1";

/// Writes a JSON header line followed by little-endian `f64` payloads in
/// header order.
pub fn save_checkpoint(path: &Path, meta: serde_json::Value, tensors: &[(String, &Tensor)]) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape.clone() })
            .collect(),
        meta,
    };
    let mut out = create_writer(path)?;
    let mut write = || -> std::io::Result<()> {
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for (_, tensor) in tensors {
            for v in &tensor.data {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<(String, Tensor)>)> {
    let bytes = {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        bytes
    };
    let corrupt = |message: &str| Error::Parse {
        path: path.display().to_string(),
        line: 1,
        message: message.to_string(),
    };
    let newline = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt("missing header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(corrupt(&format!("unknown checkpoint format {:?}", header.format)));
    }
    let mut payload = bytes[newline + 1..].chunks_exact(8);
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        let data: Vec<f64> = payload
            .by_ref()
            .take(numel)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect();
        if data.len() != numel {
            return Err(corrupt("truncated payload"));
        }
        tensors.push((entry.name.clone(), Tensor { shape: entry.shape.clone(), data }));
    }
    if payload.next().is_some() || !payload.remainder().is_empty() {
        return Err(corrupt("trailing bytes after payload"));
    }
    Ok((header, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_softmax_and_identity_matmul() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let eye = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let prod = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(prod), g.value(a));
    }

    #[test]
    fn simple_gradients() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.tanh(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), [1.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.3, -1.0, 2.0]));
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), [1.0, 1.0, 1.0]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), [2.0, 2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = g.param(Tensor::vector(vec![-4.0, 0.5, 6.0]));
        let prod = g.mul(x, y).unwrap();
        let dot = g.sum_all(prod);
        g.backward(dot).unwrap();
        assert_eq!(g.grad(x).unwrap(), [-4.0, 0.5, 6.0]);
        assert_eq!(g.grad(y).unwrap(), [1.0, 2.0, 3.0]);
    }

    #[test]
    fn non_scalar_backward_and_shape_errors() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(&[2, 3]));
        let b = g.param(Tensor::zeros(&[2, 3]));
        assert!(g.backward(a).is_err());
        let err = g.matmul(a, b).unwrap_err();
        let message = err.to_string();
        assert!(message.contains("[2, 3]") && message.contains("matmul"), "{message}");
        let c = g.param(Tensor::zeros(&[2]));
        assert!(g.add(c, a).is_err());
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalized() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -5.0, 0.0, 800.0]).unwrap());
        let shifted = g.constant(Tensor::matrix(2, 3, vec![101.0, 102.0, 103.0, 95.0, 100.0, 900.0]).unwrap());
        let a = g.softmax(x, 1).unwrap();
        let b = g.softmax(shifted, 1).unwrap();
        for r in 0..2 {
            let row = g.value(a).row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (p, q) in row.iter().zip(g.value(b).row(r)) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        assert_eq!(g.dropout(x, 0.5, false, 1).unwrap(), x);
        assert_eq!(g.dropout(x, 0.0, true, 1).unwrap(), x);
        let d1 = g.dropout(x, 0.5, true, 9).unwrap();
        let d2 = g.dropout(x, 0.5, true, 9).unwrap();
        assert_eq!(g.value(d1), g.value(d2));
        for (out, inp) in g.value(d1).data().iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!(*out == 0.0 || *out == inp * 2.0);
        }
        assert!(g.dropout(x, 1.0, true, 1).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let a = Tensor::matrix(2, 2, vec![1.5, -2.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        let b = Tensor::vector(vec![0.1, 0.2, 0.3]);
        let meta = serde_json::json!({"vocab_hash": "abc"});
        save_checkpoint(&path, meta.clone(), &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        let (header, tensors) = load_checkpoint(&path).unwrap();
        assert_eq!(header.meta, meta);
        assert_eq!(tensors, vec![("a".to_string(), a), ("b".to_string(), b)]);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}

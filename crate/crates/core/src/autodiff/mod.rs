//! Tape-based reverse-mode differentiation over dense [`Tensor`]s.
//!
//! Every primitive appends one node to a [`Tape`]. Nodes are only ever
//! appended, so the node vector is already in topological order and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Parameters live outside the tape in a [`ParamStore`]. They enter a tape
//! either whole ([`Tape::param`]) or as a row subset of an embedding table
//! ([`Tape::gather_param`]); the latter keeps per-example gradients sparse.

mod adam;
mod gru;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gru::{gru_cell, GruParams, GruVars};

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported operand shape {shape:?}")]
    BadRank { op: &'static str, shape: Vec<usize> },
    #[error("masked softmax: row {row} has no unmasked entries")]
    AllMasked { row: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("row {index} out of range for {rows} rows")]
    RowOutOfRange { index: usize, rows: usize },
    #[error("{op}: needs at least one operand")]
    NoOperands { op: &'static str },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive kinds a tape can record.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    GatherParam { param: ParamId, rows: Vec<usize> },
    Gather { src: Var, rows: Vec<usize> },
    Row { src: Var, index: usize },
    MatMul(Var, Var),
    /// `A Bᵀ` for matrices.
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    RepeatRows(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    MeanRows(Var),
    Sum(Var),
    Dot(Var, Var),
    MaskedSoftmax(Var, Vec<bool>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Record of primitive applications in evaluation order.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// How `rhs` lines up against `lhs` in an elementwise binary op.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Rows,
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if a.rank() == 2 && b.rank() == 1 && a.shape()[1] == b.shape()[0] {
        Ok(Broadcast::Rows)
    } else {
        Err(mismatch(op, a, b))
    }
}

fn matmul_values(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match (a.shape(), b.shape()) {
        (&[r, c], &[c2, k]) if c == c2 => {
            let mut out = vec![0.0; r * k];
            let (ad, bd) = (a.data(), b.data());
            for i in 0..r {
                let orow = &mut out[i * k..(i + 1) * k];
                for p in 0..c {
                    let av = ad[i * c + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * k..(p + 1) * k];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            Ok(Tensor::matrix(r, k, out))
        }
        (&[r, c], &[c2]) if c == c2 => {
            let (ad, x) = (a.data(), b.data());
            let out = (0..r)
                .map(|i| ad[i * c..(i + 1) * c].iter().zip(x).map(|(w, v)| w * v).sum())
                .collect();
            Ok(Tensor::vector(out))
        }
        (&[n], &[n2, k]) if n == n2 => {
            let (x, bd) = (a.data(), b.data());
            let mut out = vec![0.0; k];
            for p in 0..n {
                let xv = x[p];
                for (o, bv) in out.iter_mut().zip(&bd[p * k..(p + 1) * k]) {
                    *o += xv * bv;
                }
            }
            Ok(Tensor::vector(out))
        }
        _ => Err(mismatch("matmul", a, b)),
    }
}

/// `A Bᵀ` for `A: [r, c]`, `B: [k, c]`.
fn matmul_nt_values(a: &[f64], b: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((a.len() / c.max(1)) * (b.len() / c.max(1)));
    for arow in a.chunks_exact(c) {
        for brow in b.chunks_exact(c) {
            out.push(arow.iter().zip(brow).map(|(x, y)| x * y).sum());
        }
    }
    out
}

/// `dst += Xᵀ Y` for `X: [r, c]`, `Y: [r, k]`, `dst: [c, k]`.
fn add_tn(dst: &mut [f64], x: &[f64], c: usize, y: &[f64], k: usize) {
    for (xrow, yrow) in x.chunks_exact(c).zip(y.chunks_exact(k)) {
        for (p, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (d, yv) in dst[p * k..(p + 1) * k].iter_mut().zip(yrow) {
                *d += xv * yv;
            }
        }
    }
}

/// `dst += X Y` for `X: [r, c]`, `Y: [c, k]`, `dst: [r, k]`.
fn add_nn(dst: &mut [f64], x: &[f64], c: usize, y: &[f64], k: usize) {
    for (xrow, drow) in x.chunks_exact(c).zip(dst.chunks_exact_mut(k)) {
        for (p, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (d, yv) in drow.iter_mut().zip(&y[p * k..(p + 1) * k]) {
                *d += xv * yv;
            }
        }
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn transpose_values(a: &Tensor) -> Tensor {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let src = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Tensor::matrix(c, r, out)
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(src) {
                *a += b;
            }
        }
        None => *dst = Some(src.to_vec()),
    }
}

/// Adds `src` into the column-broadcast slot: sums rows of a `[r, c]` gradient.
fn add_row_sums(dst: &mut Option<Vec<f64>>, src: &[f64], cols: usize) {
    let mut acc = vec![0.0; cols];
    for row in src.chunks(cols) {
        for (a, b) in acc.iter_mut().zip(row) {
            *a += b;
        }
    }
    add_into(dst, &acc);
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input owned by the tape.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Same as [`Tape::leaf`]; gradients are available but typically ignored.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.constant(Tensor::zeros(shape))
    }

    /// Copies a whole parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    /// Gathers rows of a rank-2 parameter (an embedding table) onto the tape.
    /// The result has shape `[rows.len(), cols]`.
    pub fn gather_param(&mut self, store: &ParamStore, id: ParamId, rows: &[usize]) -> Result<Var> {
        let table = store.get(id);
        if table.rank() != 2 {
            return Err(AutodiffError::BadRank {
                op: "gather-rows",
                shape: table.shape().to_vec(),
            });
        }
        let value = gather_values(table, rows)?;
        Ok(self.push(
            value,
            Op::GatherParam {
                param: id,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Gathers rows of a rank-2 tape value.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let s = self.value(src);
        if s.rank() != 2 {
            return Err(AutodiffError::BadRank {
                op: "gather-rows",
                shape: s.shape().to_vec(),
            });
        }
        let value = gather_values(s, rows)?;
        Ok(self.push(
            value,
            Op::Gather {
                src,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Row `index` of a matrix, as a vector.
    pub fn row(&mut self, src: Var, index: usize) -> Result<Var> {
        let s = self.value(src);
        if s.rank() != 2 {
            return Err(AutodiffError::BadRank {
                op: "row",
                shape: s.shape().to_vec(),
            });
        }
        if index >= s.shape()[0] {
            return Err(AutodiffError::RowOutOfRange {
                index,
                rows: s.shape()[0],
            });
        }
        let value = Tensor::vector(s.row(index).to_vec());
        Ok(self.push(value, Op::Row { src, index }))
    }

    /// Matrix product. Supports `[r,c]·[c,k]`, `[r,c]·[c]` and `[n]·[n,k]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_values(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `A Bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.cols() {
            return Err(mismatch("matmul-nt", ta, tb));
        }
        let (r, k) = (ta.rows(), tb.rows());
        let value = Tensor::matrix(r, k, matmul_nt_values(ta.data(), tb.data(), ta.cols()));
        Ok(self.push(value, Op::MatMulNT(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(AutodiffError::BadRank {
                op: "transpose",
                shape: t.shape().to_vec(),
            });
        }
        let value = transpose_values(t);
        Ok(self.push(value, Op::Transpose(a)))
    }

    /// Elementwise sum. `b` may be a vector broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("elementwise-mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    fn binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let kind = broadcast_kind(op, ta, tb)?;
        let mut out = ta.clone();
        match kind {
            Broadcast::Same => {
                for (o, y) in out.data_mut().iter_mut().zip(tb.data()) {
                    *o = f(*o, *y);
                }
            }
            Broadcast::Rows => {
                let cols = tb.len();
                for row in out.data_mut().chunks_mut(cols) {
                    for (o, y) in row.iter_mut().zip(tb.data()) {
                        *o = f(*o, *y);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// Concatenation along the last axis. Operands are all vectors, or all
    /// matrices with the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or(AutodiffError::NoOperands { op: "concat" })?);
        let rank = first.rank();
        let rows = first.rows();
        for &p in &parts[1..] {
            let t = self.value(p);
            if t.rank() != rank || (rank == 2 && t.rows() != rows) || rank > 2 || rank == 0 {
                return Err(mismatch("concat", first, t));
            }
        }
        if rank == 0 || rank > 2 {
            return Err(AutodiffError::BadRank {
                op: "concat",
                shape: first.shape().to_vec(),
            });
        }
        let total_cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = if rank == 1 {
            Tensor::vector(data)
        } else {
            Tensor::matrix(rows, total_cols, data)
        };
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = self.value(*rows.first().ok_or(AutodiffError::NoOperands { op: "stack" })?);
        if first.rank() != 1 {
            return Err(AutodiffError::BadRank {
                op: "stack",
                shape: first.shape().to_vec(),
            });
        }
        let cols = first.len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            let t = self.value(r);
            if t.shape() != [cols] {
                return Err(mismatch("stack", self.value(rows[0]), t));
            }
            data.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows.len(), cols, data);
        Ok(self.push(value, Op::Stack(rows.to_vec())))
    }

    /// Tiles a vector into `count` identical rows.
    pub fn repeat_rows(&mut self, a: Var, count: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 1 {
            return Err(AutodiffError::BadRank {
                op: "repeat-rows",
                shape: t.shape().to_vec(),
            });
        }
        let cols = t.len();
        let data = t.data().repeat(count);
        Ok(self.push(Tensor::matrix(count, cols, data), Op::RepeatRows(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(value, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        self.push(value, Op::Softplus(a))
    }

    /// Mean over the rows of `[n, c]`. An empty matrix pools to the zero vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(AutodiffError::BadRank {
                op: "mean-pool",
                shape: t.shape().to_vec(),
            });
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; c];
        for row in t.data().chunks(c.max(1)).take(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        if n > 0 {
            for o in &mut out {
                *o /= n as f64;
            }
        }
        Ok(self.push(Tensor::vector(out), Op::MeanRows(a)))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Contraction over the last axis: vector·vector gives a scalar,
    /// `[r,c]`·`[r,c]` gives the `r` row-wise dot products.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || ta.rank() == 0 || ta.rank() > 2 {
            return Err(mismatch("dot", ta, tb));
        }
        let c = ta.cols();
        let vals: Vec<f64> = ta
            .data()
            .chunks(c.max(1))
            .zip(tb.data().chunks(c.max(1)))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let value = if ta.rank() == 1 {
            Tensor::scalar(vals.first().copied().unwrap_or(0.0))
        } else {
            Tensor::vector(vals)
        };
        Ok(self.push(value, Op::Dot(a, b)))
    }

    /// Softmax along the last axis restricted to entries where `mask` is
    /// true. Masked entries come out as exactly zero.
    pub fn masked_softmax(&mut self, logits: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(logits);
        if mask.len() != t.len() || t.rank() == 0 || t.rank() > 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "masked-softmax",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let c = t.cols();
        let mut out = vec![0.0; t.len()];
        for (r, (row, mrow)) in t.data().chunks(c).zip(mask.chunks(c)).enumerate() {
            let max = row
                .iter()
                .zip(mrow)
                .filter(|(_, &m)| m)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(AutodiffError::AllMasked { row: r });
            }
            let orow = &mut out[r * c..(r + 1) * c];
            let mut total = 0.0;
            for ((o, &x), &m) in orow.iter_mut().zip(row).zip(mrow) {
                if m {
                    *o = (x - max).exp();
                    total += *o;
                }
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::MaskedSoftmax(logits, mask.to_vec())))
    }

    /// Plain softmax along the last axis.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let mask = vec![true; self.value(logits).len()];
        self.masked_softmax(logits, &mask)
    }

    /// Inverted dropout: keeps each entry with probability `1 - p` and
    /// rescales survivors by `1 / (1 - p)`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        let shape = self.value(a).shape().to_vec();
        let keep = 1.0 - p;
        let mut mask = Tensor::zeros(&shape);
        for m in mask.data_mut() {
            if rng.gen::<f64>() < keep {
                *m = 1.0 / keep;
            }
        }
        let mask = self.constant(mask);
        self.mul(a, mask)
    }

    /// `W x + b` for a vector `x`, or `X Wᵀ + b` row-wise for a matrix `X`.
    pub fn affine(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let out = match self.value(x).rank() {
            1 => self.matmul(w, x)?,
            2 => self.matmul_nt(x, w)?,
            _ => {
                return Err(AutodiffError::BadRank {
                    op: "affine",
                    shape: self.value(x).shape().to_vec(),
                })
            }
        };
        match bias {
            Some(b) => self.add(out, b),
            None => Ok(out),
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 || lt.rank() > 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) | Op::GatherParam { .. } => {}
            Op::Gather { src, rows } => {
                let st = self.value(*src);
                let c = st.cols();
                let slot = adj[src.0].get_or_insert_with(|| vec![0.0; st.len()]);
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        slot[r * c + j] += g[k * c + j];
                    }
                }
            }
            Op::Row { src, index } => {
                let st = self.value(*src);
                let c = st.cols();
                let slot = adj[src.0].get_or_insert_with(|| vec![0.0; st.len()]);
                for j in 0..c {
                    slot[index * c + j] += g[j];
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                match (ta.rank(), tb.rank()) {
                    (2, 2) => {
                        // dA = G Bᵀ, dB = Aᵀ G
                        let (c, k) = (ta.cols(), tb.cols());
                        let da = matmul_nt_values(g, tb.data(), k);
                        add_into(&mut adj[a.0], &da);
                        add_tn(slot(adj, *b, tb.len()), ta.data(), c, g, k);
                    }
                    (2, 1) => {
                        // y = A x: dA = g xᵀ, dx = Aᵀ g
                        let (r, c) = (ta.shape()[0], ta.shape()[1]);
                        let x = tb.data();
                        let mut da = vec![0.0; r * c];
                        for (ri, gv) in g.iter().enumerate() {
                            for (j, xv) in x.iter().enumerate() {
                                da[ri * c + j] = gv * xv;
                            }
                        }
                        let mut dx = vec![0.0; c];
                        add_nn(&mut dx, g, r, ta.data(), c);
                        add_into(&mut adj[a.0], &da);
                        add_into(&mut adj[b.0], &dx);
                    }
                    (1, 2) => {
                        // y = xᵀ B: dx = B g, dB = x gᵀ
                        let (n, k) = (tb.shape()[0], tb.shape()[1]);
                        let x = ta.data();
                        let dx = matmul_nt_values(tb.data(), g, k);
                        let mut db = vec![0.0; n * k];
                        for (p, xv) in x.iter().enumerate() {
                            for (j, gv) in g.iter().enumerate() {
                                db[p * k + j] = xv * gv;
                            }
                        }
                        add_into(&mut adj[a.0], &dx);
                        add_into(&mut adj[b.0], &db);
                    }
                    _ => unreachable!("matmul ranks validated in forward"),
                }
            }
            Op::MatMulNT(a, b) => {
                // Y = A Bᵀ: dA = G B, dB = Gᵀ A
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (c, k) = (ta.cols(), tb.rows());
                add_nn(slot(adj, *a, ta.len()), g, k, tb.data(), c);
                add_tn(slot(adj, *b, tb.len()), g, k, ta.data(), c);
            }
            Op::Transpose(a) => {
                let gt = Tensor::new(out.shape().to_vec(), g.to_vec()).expect("adjoint shape");
                add_into(&mut adj[a.0], transpose_values(&gt).data());
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                add_into(&mut adj[a.0], g);
                let tb = self.value(*b);
                let gb: Vec<f64> = g.iter().map(|v| sign * v).collect();
                if tb.shape() == out.shape() {
                    add_into(&mut adj[b.0], &gb);
                } else {
                    add_row_sums(&mut adj[b.0], &gb, tb.len());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if ta.shape() == tb.shape() {
                    let da: Vec<f64> = g.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    let db: Vec<f64> = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    add_into(&mut adj[a.0], &da);
                    add_into(&mut adj[b.0], &db);
                } else {
                    let c = tb.len();
                    let da: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(k, x)| x * tb.data()[k % c])
                        .collect();
                    let db: Vec<f64> = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    add_into(&mut adj[a.0], &da);
                    add_row_sums(&mut adj[b.0], &db, c);
                }
            }
            Op::Scale(a, f) => {
                let da: Vec<f64> = g.iter().map(|v| v * f).collect();
                add_into(&mut adj[a.0], &da);
            }
            Op::Concat(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    let mut dp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        dp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    add_into(&mut adj[p.0], &dp);
                    offset += c;
                }
            }
            Op::Stack(rows) => {
                let c = out.cols();
                for (k, r) in rows.iter().enumerate() {
                    add_into(&mut adj[r.0], &g[k * c..(k + 1) * c]);
                }
            }
            Op::RepeatRows(a) => {
                add_row_sums(&mut adj[a.0], g, out.cols());
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let da: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                add_into(&mut adj[a.0], &da);
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a).data();
                let da: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { slope * gv })
                    .collect();
                add_into(&mut adj[a.0], &da);
            }
            Op::Sigmoid(a) => {
                let da: Vec<f64> = g.iter().zip(out.data()).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                add_into(&mut adj[a.0], &da);
            }
            Op::Tanh(a) => {
                let da: Vec<f64> = g.iter().zip(out.data()).map(|(gv, t)| gv * (1.0 - t * t)).collect();
                add_into(&mut adj[a.0], &da);
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                let da: Vec<f64> = g.iter().zip(x).map(|(gv, &xv)| gv * sigmoid(xv)).collect();
                add_into(&mut adj[a.0], &da);
            }
            Op::MeanRows(a) => {
                let ta = self.value(*a);
                let n = ta.shape()[0];
                if n > 0 {
                    let scaled: Vec<f64> = g.iter().map(|v| v / n as f64).collect();
                    let da = scaled.repeat(n);
                    add_into(&mut adj[a.0], &da);
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                add_into(&mut adj[a.0], &vec![g[0]; n]);
            }
            Op::Dot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = ta.cols();
                let da: Vec<f64> = tb.data().iter().enumerate().map(|(k, y)| g[k / c] * y).collect();
                let db: Vec<f64> = ta.data().iter().enumerate().map(|(k, x)| g[k / c] * x).collect();
                add_into(&mut adj[a.0], &da);
                add_into(&mut adj[b.0], &db);
            }
            Op::MaskedSoftmax(a, mask) => {
                let c = out.cols();
                let y = out.data();
                let mut da = vec![0.0; y.len()];
                for r in 0..out.len() / c.max(1) {
                    let span = r * c..(r + 1) * c;
                    let inner: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                    for k in span {
                        if mask[k] {
                            da[k] = y[k] * (g[k] - inner);
                        }
                    }
                }
                add_into(&mut adj[a.0], &da);
            }
        }
    }

    /// Folds the per-node adjoints into per-parameter gradients.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::new(store.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(Some(g)) = grads.adjoints.get(i) else { continue };
            match &node.op {
                Op::Param(id) => out.add_dense(*id, g, store),
                Op::GatherParam { param, rows } => {
                    let c = store.get(*param).cols();
                    for (k, &r) in rows.iter().enumerate() {
                        out.add_row(*param, r, &g[k * c..(k + 1) * c]);
                    }
                }
                _ => {}
            }
        }
        out
    }
}

fn gather_values(src: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let (n, c) = (src.shape()[0], src.shape()[1]);
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        if r >= n {
            return Err(AutodiffError::RowOutOfRange { index: r, rows: n });
        }
        data.extend_from_slice(src.row(r));
    }
    Ok(Tensor::matrix(rows.len(), c, data))
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zero when `v` does not
    /// influence the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.value(v).shape().to_vec();
        match self.adjoints.get(v.0) {
            Some(Some(g)) => Tensor::new(shape, g.clone()).expect("adjoint shape"),
            _ => Tensor::zeros(&shape),
        }
    }
}

/// Gradient for one parameter: dense, or a sparse set of table rows.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamGrad {
    Dense(Vec<f64>),
    Rows(BTreeMap<usize, Vec<f64>>),
}

/// Per-parameter gradients, indexed like the [`ParamStore`] they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    entries: Vec<Option<ParamGrad>>,
}

impl ParamGrads {
    pub fn new(len: usize) -> Self {
        ParamGrads {
            entries: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ParamGrad> {
        self.entries[id.0].as_ref()
    }

    fn add_dense(&mut self, id: ParamId, g: &[f64], store: &ParamStore) {
        let entry = &mut self.entries[id.0];
        match entry {
            None => *entry = Some(ParamGrad::Dense(g.to_vec())),
            Some(ParamGrad::Dense(d)) => {
                for (a, b) in d.iter_mut().zip(g) {
                    *a += b;
                }
            }
            Some(ParamGrad::Rows(rows)) => {
                let c = store.get(id).cols();
                let mut d = g.to_vec();
                for (r, v) in rows.iter() {
                    for (j, x) in v.iter().enumerate() {
                        d[r * c + j] += x;
                    }
                }
                *entry = Some(ParamGrad::Dense(d));
            }
        }
    }

    fn add_row(&mut self, id: ParamId, row: usize, g: &[f64]) {
        let entry = &mut self.entries[id.0];
        match entry {
            None => {
                let mut m = BTreeMap::new();
                m.insert(row, g.to_vec());
                *entry = Some(ParamGrad::Rows(m));
            }
            Some(ParamGrad::Rows(m)) => match m.get_mut(&row) {
                Some(v) => {
                    for (a, b) in v.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                None => {
                    m.insert(row, g.to_vec());
                }
            },
            Some(ParamGrad::Dense(d)) => {
                let c = g.len();
                for (j, x) in g.iter().enumerate() {
                    d[row * c + j] += x;
                }
            }
        }
    }

    /// Adds these gradients into dense per-parameter accumulators.
    pub fn accumulate_into(&self, dense: &mut [Tensor]) {
        for (entry, acc) in self.entries.iter().zip(dense.iter_mut()) {
            match entry {
                None => {}
                Some(ParamGrad::Dense(d)) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(d) {
                        *a += b;
                    }
                }
                Some(ParamGrad::Rows(rows)) => {
                    let c = acc.cols();
                    let data = acc.data_mut();
                    for (r, v) in rows {
                        for (j, x) in v.iter().enumerate() {
                            data[r * c + j] += x;
                        }
                    }
                }
            }
        }
    }

    /// Dense gradients shaped like `store`; untouched parameters are zero.
    pub fn to_dense(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut dense: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        self.accumulate_into(&mut dense);
        dense
    }
}

//! Dense 64-bit matrices, a reverse-mode autodiff tape, and the Adam
//! optimizer shared by every training loop in this crate.
//!
//! Everything is a 2-D row-major matrix; scalars are 1×1 and vectors are
//! 1×d. That keeps the op set small and every backward rule short enough to
//! audit by hand.
//!
//! A [`Tape`] records one step's computation. Parameters live *outside* the
//! tape as plain [`Tensor`]s: each training step inserts them as leaves,
//! runs forward, calls [`Tape::backward`], reads the gradients back, and
//! drops the tape. Frozen parameters enter through [`Tape::constant`] and
//! never receive gradients.
//!
//! Error policy: shape mismatches panic (they are programming errors), while
//! data-dependent failures — zero-norm cosine inputs, non-positive logs,
//! non-scalar losses — are `Err`.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

// ===== dense matrix =====

/// Dense row-major matrix of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor data length {} does not match shape {}x{}",
            data.len(),
            rows,
            cols
        );
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Tensor::filled(rows, cols, 1.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor::new(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar_tensor(value: f64) -> Self {
        Tensor::new(1, 1, vec![value])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows in from_rows");
            data.extend_from_slice(r);
        }
        Tensor::new(rows.len(), cols, data)
    }

    /// Entries drawn i.i.d. uniform from `[lo, hi)`.
    pub fn uniform<R: Rng>(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn scalar(&self) -> f64 {
        assert!(self.is_scalar(), "scalar() on a {}x{} tensor", self.rows, self.cols);
        self.data[0]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Plain (untracked) matrix product; the tape op reuses this kernel.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {}x{} · {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out.data[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for j in 0..n {
                    o_row[j] += a * b_row[j];
                }
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    /// Adds `other` into self elementwise.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// True iff shapes match and every entry has identical bits.
    pub fn bit_equal(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    // ----- serialization -----
    //
    // Per-tensor binary layout: u64 rank, u64 dims[rank], then the entries as
    // little-endian IEEE-754 f64 in row-major order. Rank is always written
    // as 2; rank-1 files are accepted on read as 1×d.

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.data.len() * 8);
        out.extend_from_slice(&2u64.to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
        let mut cursor = bytes;
        let mut read_u64 = |what: &str| -> Result<u64> {
            if cursor.len() < 8 {
                return Err(Error::Format(format!("tensor file truncated reading {what}")));
            }
            let (head, tail) = cursor.split_at(8);
            cursor = tail;
            Ok(u64::from_le_bytes(head.try_into().unwrap()))
        };
        let rank = read_u64("rank")?;
        let (rows, cols) = match rank {
            1 => (1, read_u64("dim 0")? as usize),
            2 => {
                let r = read_u64("dim 0")? as usize;
                let c = read_u64("dim 1")? as usize;
                (r, c)
            }
            r => return Err(Error::Format(format!("unsupported tensor rank {r}"))),
        };
        let expected = rows * cols * 8;
        if cursor.len() != expected {
            return Err(Error::Format(format!(
                "tensor file has {} data bytes, expected {} for shape {}x{}",
                cursor.len(),
                expected,
                rows,
                cols
            )));
        }
        let data = cursor
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(rows, cols, data))
    }
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&t.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes)
}

/// Hex-encoded SHA-256; used for checkpoint content hashes and cache keys.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

// ===== sparse matrix (CSR) =====

/// Compressed sparse row matrix. Used for normalized adjacency operators;
/// entries are constants on the tape (graphs are data, not parameters).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn from_csr(
        rows: usize,
        cols: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Self {
        assert_eq!(indptr.len(), rows + 1, "indptr length must be rows+1");
        assert_eq!(indptr[0], 0);
        assert_eq!(*indptr.last().unwrap(), indices.len());
        assert_eq!(indices.len(), values.len());
        assert!(indices.iter().all(|&c| c < cols), "column index out of range");
        SparseMatrix {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; rows + 1];
        for &(r, _, _) in triplets {
            assert!(r < rows, "row index out of range");
            counts[r + 1] += 1;
        }
        for i in 0..rows {
            counts[i + 1] += counts[i];
        }
        let indptr = counts.clone();
        let mut indices = vec![0usize; triplets.len()];
        let mut values = vec![0.0; triplets.len()];
        let mut next = counts;
        let mut sorted: Vec<_> = triplets.to_vec();
        sorted.sort_by_key(|&(r, c, _)| (r, c));
        for (r, c, v) in sorted {
            let slot = next[r];
            indices[slot] = c;
            values[slot] = v;
            next[r] += 1;
        }
        SparseMatrix::from_csr(rows, cols, indptr, indices, values)
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix::from_csr(n, n, (0..=n).collect(), (0..n).collect(), vec![1.0; n])
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        SparseMatrix::from_csr(n, n, (0..=n).collect(), (0..n).collect(), diag.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.indices {
            counts[c + 1] += 1;
        }
        for i in 0..self.cols {
            counts[i + 1] += counts[i];
        }
        let indptr = counts.clone();
        let mut indices = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        let mut next = counts;
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                let c = self.indices[k];
                let slot = next[c];
                indices[slot] = r;
                values[slot] = self.values[k];
                next[c] += 1;
            }
        }
        SparseMatrix::from_csr(self.cols, self.rows, indptr, indices, values)
    }

    /// y = S · x with dense x.
    pub fn matmul_dense(&self, x: &Tensor) -> Tensor {
        assert_eq!(
            self.cols,
            x.rows(),
            "spmm shape mismatch: {}x{} · {}x{}",
            self.rows,
            self.cols,
            x.rows(),
            x.cols()
        );
        let n = x.cols();
        let mut out = Tensor::zeros(self.rows, n);
        for r in 0..self.rows {
            let o_row = &mut out.data[r * n..(r + 1) * n];
            for k in self.indptr[r]..self.indptr[r + 1] {
                let v = self.values[k];
                let x_row = x.row(self.indices[k]);
                for j in 0..n {
                    o_row[j] += v * x_row[j];
                }
            }
        }
        out
    }

    /// Dense materialization, for small oracles and tests.
    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                out.set(r, self.indices[k], self.values[k]);
            }
        }
        out
    }
}

// ===== autodiff tape =====

/// Handle to a value recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone)]
enum Op {
    Leaf,
    Constant,
    Matmul(Var, Var),
    Spmm(Arc<SparseMatrix>, Var),
    Add(Var, Var),
    /// Elementwise product; the second operand may be the same shape, a 1×d
    /// row broadcast over every row, or a 1×1 scalar broadcast.
    Mul(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    MeanRows(Var),
    CosineSim(Var, Var),
    Exp(Var),
    Ln(Var),
    SumAll(Var),
    SelectRow(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of one step's computation. Insertion order is a
/// topological order, so the backward sweep is a single reverse pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by [`Tape::backward`]; `None` for constants and
    /// for nodes the loss never touched.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient, or zeros of the node's shape if none was accumulated.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        match self.grad(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.nodes[v.0].value.shape();
                Tensor::zeros(r, c)
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input; receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Frozen input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.needs_grad(a) || self.needs_grad(b);
        self.push(value, Op::Matmul(a, b), rg)
    }

    /// Sparse × dense product. The sparse operand is a constant.
    pub fn spmm(&mut self, s: &Arc<SparseMatrix>, x: Var) -> Var {
        let value = s.matmul_dense(self.value(x));
        let rg = self.needs_grad(x);
        self.push(value, Op::Spmm(Arc::clone(s), x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let value = Tensor::new(
            ta.rows,
            ta.cols,
            ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect(),
        );
        let rg = self.needs_grad(a) || self.needs_grad(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Elementwise product `a ⊙ b`. `b` may match `a`'s shape, be a 1×cols
    /// row vector (broadcast over rows), or a 1×1 scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = match mul_mode(ta.shape(), tb.shape()) {
            MulMode::Same => Tensor::new(
                ta.rows,
                ta.cols,
                ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect(),
            ),
            MulMode::Row => {
                let mut out = ta.clone();
                for i in 0..out.rows {
                    for j in 0..out.cols {
                        out.data[i * out.cols + j] *= tb.data[j];
                    }
                }
                out
            }
            MulMode::Scalar => ta.map(|x| x * tb.data[0]),
        };
        let rg = self.needs_grad(a) || self.needs_grad(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.needs_grad(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// Product with a compile-time-known scalar coefficient.
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x * k);
        let rg = self.needs_grad(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    /// Column means over rows: n×d → 1×d.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        assert!(ta.rows >= 1, "mean_rows of an empty tensor");
        let n = ta.rows as f64;
        let mut out = Tensor::zeros(1, ta.cols);
        for i in 0..ta.rows {
            for j in 0..ta.cols {
                out.data[j] += ta.data[i * ta.cols + j];
            }
        }
        for v in &mut out.data {
            *v /= n;
        }
        let rg = self.needs_grad(a);
        self.push(out, Op::MeanRows(a), rg)
    }

    /// Cosine similarity of two 1×d vectors → 1×1. Errors on a zero-norm
    /// input rather than epsilon-guarding: a silent epsilon would change
    /// gradients, and zero embeddings indicate a degenerate setup upstream.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rows, 1, "cosine_sim expects 1×d vectors");
        assert_eq!(ta.shape(), tb.shape(), "cosine_sim shape mismatch");
        let (dot, na2, nb2) = dot_and_norms(ta.data(), tb.data());
        if na2 == 0.0 || nb2 == 0.0 {
            return Err(Error::ZeroNorm);
        }
        let value = Tensor::scalar_tensor(dot / (na2.sqrt() * nb2.sqrt()));
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(value, Op::CosineSim(a, b), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.needs_grad(a);
        self.push(value, Op::Exp(a), rg)
    }

    /// Natural log; errors if any entry is ≤ 0.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.data.iter().any(|&x| x <= 0.0) {
            return Err(Error::NonPositiveLog);
        }
        let value = ta.map(f64::ln);
        let rg = self.needs_grad(a);
        Ok(self.push(value, Op::Ln(a), rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar_tensor(self.value(a).data.iter().sum());
        let rg = self.needs_grad(a);
        self.push(value, Op::SumAll(a), rg)
    }

    /// Copy of row `i` as a 1×d vector; backward scatters into that row.
    pub fn select_row(&mut self, a: Var, i: usize) -> Var {
        let ta = self.value(a);
        assert!(i < ta.rows, "select_row index {i} out of {} rows", ta.rows);
        let value = Tensor::new(1, ta.cols, ta.row(i).to_vec());
        let rg = self.needs_grad(a);
        self.push(value, Op::SelectRow(a, i), rg)
    }

    /// Reverse sweep from a 1×1 loss. Repeated calls accumulate: each call
    /// adds a fresh ∂loss/∂node into the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss {
                rows: lt.rows,
                cols: lt.cols,
            });
        }
        let mut local: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        local[loss.0] = Some(Tensor::scalar_tensor(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = local[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            self.propagate(&op, &g, &mut local);
            if self.grads.len() < self.nodes.len() {
                self.grads.resize_with(self.nodes.len(), || None);
            }
            match &mut self.grads[i] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Routes the output gradient `g` of one node into its inputs' slots.
    fn propagate(&self, op: &Op, g: &Tensor, local: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Matmul(a, b) => {
                if self.needs_grad(*a) {
                    let delta = g.matmul(&self.value(*b).transpose());
                    add_into(local, *a, &delta);
                }
                if self.needs_grad(*b) {
                    let delta = self.value(*a).transpose().matmul(g);
                    add_into(local, *b, &delta);
                }
            }
            Op::Spmm(s, x) => {
                if self.needs_grad(*x) {
                    let delta = s.transpose().matmul_dense(g);
                    add_into(local, *x, &delta);
                }
            }
            Op::Add(a, b) => {
                if self.needs_grad(*a) {
                    add_into(local, *a, g);
                }
                if self.needs_grad(*b) {
                    add_into(local, *b, g);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mode = mul_mode(ta.shape(), tb.shape());
                if self.needs_grad(*a) {
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    match mode {
                        MulMode::Same => {
                            for idx in 0..da.data.len() {
                                da.data[idx] = g.data[idx] * tb.data[idx];
                            }
                        }
                        MulMode::Row => {
                            for i in 0..ta.rows {
                                for j in 0..ta.cols {
                                    da.data[i * ta.cols + j] =
                                        g.data[i * ta.cols + j] * tb.data[j];
                                }
                            }
                        }
                        MulMode::Scalar => {
                            for idx in 0..da.data.len() {
                                da.data[idx] = g.data[idx] * tb.data[0];
                            }
                        }
                    }
                    add_into(local, *a, &da);
                }
                if self.needs_grad(*b) {
                    // broadcast backward: sum the product over the broadcast axes
                    let mut db = Tensor::zeros(tb.rows, tb.cols);
                    match mode {
                        MulMode::Same => {
                            for idx in 0..db.data.len() {
                                db.data[idx] = g.data[idx] * ta.data[idx];
                            }
                        }
                        MulMode::Row => {
                            for i in 0..ta.rows {
                                for j in 0..ta.cols {
                                    db.data[j] += g.data[i * ta.cols + j] * ta.data[i * ta.cols + j];
                                }
                            }
                        }
                        MulMode::Scalar => {
                            db.data[0] = g
                                .data
                                .iter()
                                .zip(&ta.data)
                                .map(|(gv, av)| gv * av)
                                .sum();
                        }
                    }
                    add_into(local, *b, &db);
                }
            }
            Op::Relu(a) => {
                if self.needs_grad(*a) {
                    let ta = self.value(*a);
                    // subgradient 0 at exactly 0
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    for idx in 0..da.data.len() {
                        if ta.data[idx] > 0.0 {
                            da.data[idx] = g.data[idx];
                        }
                    }
                    add_into(local, *a, &da);
                }
            }
            Op::Scale(a, k) => {
                if self.needs_grad(*a) {
                    add_into(local, *a, &g.map(|x| x * k));
                }
            }
            Op::MeanRows(a) => {
                if self.needs_grad(*a) {
                    let ta = self.value(*a);
                    let inv_n = 1.0 / ta.rows as f64;
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    for i in 0..ta.rows {
                        for j in 0..ta.cols {
                            da.data[i * ta.cols + j] = g.data[j] * inv_n;
                        }
                    }
                    add_into(local, *a, &da);
                }
            }
            Op::CosineSim(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (dot, na2, nb2) = dot_and_norms(ta.data(), tb.data());
                let (na, nb) = (na2.sqrt(), nb2.sqrt());
                let cos = dot / (na * nb);
                let gs = g.data[0];
                if self.needs_grad(*a) {
                    let mut da = Tensor::zeros(1, ta.cols);
                    for j in 0..ta.cols {
                        da.data[j] = gs * (tb.data[j] / (na * nb) - cos * ta.data[j] / na2);
                    }
                    add_into(local, *a, &da);
                }
                if self.needs_grad(*b) {
                    let mut db = Tensor::zeros(1, tb.cols);
                    for j in 0..tb.cols {
                        db.data[j] = gs * (ta.data[j] / (na * nb) - cos * tb.data[j] / nb2);
                    }
                    add_into(local, *b, &db);
                }
            }
            Op::Exp(a) => {
                if self.needs_grad(*a) {
                    let ta = self.value(*a);
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    for idx in 0..da.data.len() {
                        da.data[idx] = g.data[idx] * ta.data[idx].exp();
                    }
                    add_into(local, *a, &da);
                }
            }
            Op::Ln(a) => {
                if self.needs_grad(*a) {
                    let ta = self.value(*a);
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    for idx in 0..da.data.len() {
                        da.data[idx] = g.data[idx] / ta.data[idx];
                    }
                    add_into(local, *a, &da);
                }
            }
            Op::SumAll(a) => {
                if self.needs_grad(*a) {
                    let ta = self.value(*a);
                    add_into(local, *a, &Tensor::filled(ta.rows, ta.cols, g.data[0]));
                }
            }
            Op::SelectRow(a, i) => {
                if self.needs_grad(*a) {
                    let ta = self.value(*a);
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    da.data[i * ta.cols..(i + 1) * ta.cols].copy_from_slice(&g.data);
                    add_into(local, *a, &da);
                }
            }
        }
    }
}

#[derive(Copy, Clone)]
enum MulMode {
    Same,
    Row,
    Scalar,
}

fn mul_mode(a: (usize, usize), b: (usize, usize)) -> MulMode {
    if a == b {
        MulMode::Same
    } else if b == (1, 1) {
        MulMode::Scalar
    } else if b.0 == 1 && b.1 == a.1 {
        MulMode::Row
    } else {
        panic!("mul shape mismatch: {}x{} ⊙ {}x{}", a.0, a.1, b.0, b.1)
    }
}

fn dot_and_norms(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut na2 = 0.0;
    let mut nb2 = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na2 += x * x;
        nb2 += y * y;
    }
    (dot, na2, nb2)
}

fn add_into(local: &mut [Option<Tensor>], v: Var, delta: &Tensor) {
    match &mut local[v.0] {
        Some(acc) => acc.add_assign(delta),
        slot @ None => *slot = Some(delta.clone()),
    }
}

// ===== optimizer =====

/// Adam with bias correction. Moment buffers are lazily shaped on the first
/// step and keyed by parameter position, so callers must pass the same
/// parameter list in the same order every step.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed between steps");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
            for idx in 0..p.data.len() {
                let gi = g.data[idx];
                m.data[idx] = self.beta1 * m.data[idx] + (1.0 - self.beta1) * gi;
                v.data[idx] = self.beta2 * v.data[idx] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m.data[idx] / bc1;
                let v_hat = v.data[idx] / bc2;
                p.data[idx] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

// ===== tests =====

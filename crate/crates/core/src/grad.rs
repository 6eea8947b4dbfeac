//! A small reverse-mode autodiff tape over dense `f64` matrices.
//!
//! Trainable state lives in a [`ParamStore`]. A [`Graph`] copies the
//! parameters it touches into leaf nodes, records every operation, and on
//! [`Graph::backward`] adds the gradients of those leaves back into the
//! store. Graphs are cheap, single-threaded and thrown away after each step.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::TokenId;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::input(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn add_scaled(&mut self, other: &Matrix, s: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// out += a · b
fn gemm_nn(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    let (n, k, m) = (a.rows, a.cols, b.cols);
    for i in 0..n {
        let orow = &mut out.data[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out += a · bᵀ
fn gemm_nt(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    let (n, k, m) = (a.rows, a.cols, b.rows);
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b.data[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out.data[i * m + j] += dot;
        }
    }
}

/// out += aᵀ · b
fn gemm_tn(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    let (k, n, m) = (a.rows, a.cols, b.cols);
    for p in 0..k {
        let brow = &b.data[p * m..(p + 1) * m];
        for i in 0..n {
            let av = a.data[p * n + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * m..(i + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    /// Bias vectors are stored with rank 1 in checkpoints.
    pub vector: bool,
    pub frozen: bool,
    m: Matrix,
    v: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
    steps: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> Result<ParamId> {
        self.insert(name.into(), value, false)
    }

    /// Registers a `1 x k` parameter that serializes as a vector.
    pub fn add_vector(&mut self, name: impl Into<String>, value: Vec<f64>) -> Result<ParamId> {
        self.insert(name.into(), Matrix::row_vector(value), true)
    }

    fn insert(&mut self, name: String, value: Matrix, vector: bool) -> Result<ParamId> {
        if self.by_name.contains_key(&name) {
            return Err(Error::input(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let (r, c) = value.shape();
        self.params.push(Param {
            name: name.clone(),
            grad: Matrix::zeros(r, c),
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
            value,
            vector,
            frozen: false,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.data.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Freezes (or thaws) every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .flat_map(|p| p.grad.data.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// One Adam update from the accumulated gradients, which are then zeroed.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        let norm = self.grad_norm();
        if !norm.is_finite() {
            return Err(Error::Numerical(format!("gradient norm is {norm}")));
        }
        let scale = match cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            if p.frozen {
                continue;
            }
            for i in 0..p.value.data.len() {
                let g = p.grad.data[i] * scale;
                let m = cfg.beta1 * p.m.data[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * p.v.data[i] + (1.0 - cfg.beta2) * g * g;
                p.m.data[i] = m;
                p.v.data[i] = v;
                p.value.data[i] -= cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
            }
        }
        self.zero_grad();
        Ok(())
    }

    /// Copies values of every same-named parameter from `other`.
    pub fn load_values_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for p in &mut self.params {
            if !p.name.starts_with(prefix) {
                continue;
            }
            if let Some(id) = other.id(&p.name) {
                let src = &other.params[id.0].value;
                if src.shape() != p.value.shape() {
                    return Err(Error::input(format!("shape mismatch for {}", p.name)));
                }
                p.value = src.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(b"SARP")?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            let dims: Vec<u32> = if p.vector {
                vec![p.value.cols as u32]
            } else {
                vec![p.value.rows as u32, p.value.cols as u32]
            };
            w.write_all(&(dims.len() as u32).to_le_bytes())?;
            for d in dims {
                w.write_all(&d.to_le_bytes())?;
            }
            for v in &p.value.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint into a fresh store (no optimizer state).
    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        let mut cur = ByteCursor {
            bytes: &bytes,
            pos: 0,
            path,
        };
        if cur.take(4)? != b"SARP" {
            return Err(cur.error(0, "bad magic, expected SARP"));
        }
        let mut store = ParamStore::new();
        while cur.pos < bytes.len() {
            let entry_start = cur.pos;
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| cur.error(entry_start as u64, "parameter name is not UTF-8"))?;
            let rank = cur.u32()?;
            let dims = (0..rank)
                .map(|_| cur.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let (rows, cols, vector) = match dims.as_slice() {
                [k] => (1, *k, true),
                [r, c] => (*r, *c, false),
                _ => return Err(cur.error(entry_start as u64, "unsupported rank")),
            };
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(f64::from_le_bytes(
                    cur.take(8)?.try_into().expect("8 bytes"),
                ));
            }
            store
                .insert(name, Matrix { rows, cols, data }, vector)
                .map_err(|e| cur.error(entry_start as u64, &e.to_string()))?;
        }
        Ok(store)
    }
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl ByteCursor<'_> {
    fn error(&self, offset: u64, message: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.error(self.pos as u64, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Tanh(Var),
    Relu(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    /// Fused softmax + mean cross-entropy; aux holds the softmax.
    CrossEntropy(Var, Vec<TokenId>),
    /// Scalar loss with a precomputed input gradient in aux.
    Precomputed(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    aux: Option<Matrix>,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::input(format!("{op}: shape mismatch {a:?} vs {b:?}"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.push_aux(value, op, None)
    }

    fn push_aux(&mut self, value: Matrix, op: Op, aux: Option<Matrix>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            aux,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Leaf holding a copy of a stored parameter; repeated calls share a node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Leaf);
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", sa, sb));
        }
        let mut out = Matrix::zeros(sa.0, sb.1);
        gemm_nn(self.value(a), self.value(b), &mut out);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(shape_err("matmul_nt", sa, sb));
        }
        let mut out = Matrix::zeros(sa.0, sb.0);
        gemm_nt(self.value(a), self.value(b), &mut out);
        Ok(self.push(out, Op::MatMulNT(a, b)))
    }

    /// `x · w + b`, with `b` a `1 x k` row broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("add", sa, sb));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(row));
        if sb.0 != 1 || sa.1 != sb.1 {
            return Err(shape_err("add_row", sa, sb));
        }
        let mut out = self.value(a).clone();
        let r = &self.nodes[row.0].value.data;
        for chunk in out.data.chunks_mut(sa.1) {
            for (o, b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("mul", sa, sb));
        }
        let mut out = self.value(a).clone();
        for (o, y) in out.data.iter_mut().zip(&self.nodes[b.0].value.data) {
            *o *= y;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|v| *v += c);
        self.push(out, Op::AddConst(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|v| *v = v.tanh());
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Logistic gate expressed through tanh: σ(x) = (1 + tanh(x/2)) / 2.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let half = self.scale(a, 0.5);
        let t = self.tanh(half);
        let s = self.scale(t, 0.5);
        self.add_const(s, 0.5)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_const(neg, 1.0)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let cols = out.cols;
        for row in out.data.chunks_mut(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let cols = out.cols;
        for row in out.data.chunks_mut(cols) {
            let z = crate::labels::log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= z);
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Per-row standardization without affine terms; aux holds 1/σ per row.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        const EPS: f64 = 1e-5;
        let mut out = self.value(a).clone();
        let cols = out.cols;
        let mut inv = Vec::with_capacity(out.rows);
        for row in out.data.chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
            inv.push(s);
        }
        let aux = Matrix::row_vector(inv);
        self.push_aux(out, Op::LayerNorm(a), Some(aux))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.shape(p).1).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            if m.cols != cols {
                return Err(shape_err("concat_rows", (rows, cols), m.shape()));
            }
            rows += m.rows;
            data.extend_from_slice(&m.data);
        }
        Ok(self.push(Matrix { rows, cols, data }, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.shape(p).0).unwrap_or(0);
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::input("concat_cols: row count mismatch"));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = &self.nodes[p.0].value;
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + m.cols].copy_from_slice(m.row(r));
            }
            offset += m.cols;
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start > end || end > r {
            return Err(Error::input(format!(
                "slice_rows {start}..{end} of {r} rows"
            )));
        }
        let data = self.value(a).data[start * c..end * c].to_vec();
        Ok(self.push(
            Matrix {
                rows: end - start,
                cols: c,
                data,
            },
            Op::SliceRows(a, start),
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start > end || end > c {
            return Err(Error::input(format!(
                "slice_cols {start}..{end} of {c} cols"
            )));
        }
        let w = end - start;
        let mut out = Matrix::zeros(r, w);
        let src = self.value(a);
        for i in 0..r {
            out.data[i * w..(i + 1) * w].copy_from_slice(&src.data[i * c + start..i * c + end]);
        }
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    /// Row lookup (embedding table access).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(table);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= r {
                return Err(Error::input(format!("gather_rows: row {i} of {r}")));
            }
            data.extend_from_slice(self.value(table).row(i));
        }
        Ok(self.push(
            Matrix {
                rows: ids.len(),
                cols: c,
                data,
            },
            Op::GatherRows(table, ids.to_vec()),
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Matrix::row_vector(vec![s]), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).data.len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[TokenId]) -> Result<Var> {
        let (n, k) = self.shape(logits);
        if targets.len() != n || n == 0 {
            return Err(Error::input(format!(
                "softmax_xent: {} targets for {n} rows",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::input(format!(
                "softmax_xent: target {t} outside {k} classes"
            )));
        }
        let mut probs = self.value(logits).clone();
        let mut loss = 0.0;
        for (row, &t) in probs.data.chunks_mut(k).zip(targets) {
            let z = crate::labels::log_sum_exp(row);
            loss += z - row[t];
            row.iter_mut().for_each(|v| *v = (*v - z).exp());
        }
        let value = Matrix::row_vector(vec![loss / n as f64]);
        Ok(self.push_aux(
            value,
            Op::CrossEntropy(logits, targets.to_vec()),
            Some(probs),
        ))
    }

    /// Scalar node whose value and input gradient were computed elsewhere
    /// (e.g. by a dynamic program).
    pub fn precomputed_loss(&mut self, input: Var, loss: f64, grad: Matrix) -> Result<Var> {
        if grad.shape() != self.shape(input) {
            return Err(shape_err(
                "precomputed_loss",
                grad.shape(),
                self.shape(input),
            ));
        }
        Ok(self.push_aux(
            Matrix::row_vector(vec![loss]),
            Op::Precomputed(input),
            Some(grad),
        ))
    }

    /// Back-propagates from a scalar `root` and accumulates parameter
    /// gradients into `store`. Returns the gradient of every node.
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(root)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, &grads[i]) {
                store.get_mut(pid).grad.add_assign(g);
            }
        }
        Ok(())
    }

    /// Gradients of a scalar `root` with respect to every node (None when
    /// the node does not influence the root).
    pub fn gradients(&self, root: Var) -> Result<Vec<Option<Matrix>>> {
        if self.shape(root) != (1, 1) {
            return Err(Error::input(format!(
                "backward from non-scalar root of shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::row_vector(vec![1.0]));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Matrix>], v: Var) -> &'g mut Matrix {
            let (r, c) = nodes[v.0].value.shape();
            grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c))
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                gemm_nt(g, val(*b), slot(&self.nodes, grads, *a));
                gemm_tn(val(*a), g, slot(&self.nodes, grads, *b));
            }
            Op::MatMulNT(a, b) => {
                gemm_nn(g, val(*b), slot(&self.nodes, grads, *a));
                gemm_tn(g, val(*a), slot(&self.nodes, grads, *b));
            }
            Op::Add(a, b) => {
                slot(&self.nodes, grads, *a).add_assign(g);
                slot(&self.nodes, grads, *b).add_assign(g);
            }
            Op::AddRow(a, b) => {
                slot(&self.nodes, grads, *a).add_assign(g);
                let gb = slot(&self.nodes, grads, *b);
                for row in g.data.chunks(g.cols) {
                    for (o, v) in gb.data.iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = slot(&self.nodes, grads, *a);
                for ((o, gv), y) in ga.data.iter_mut().zip(&g.data).zip(&vb.data) {
                    *o += gv * y;
                }
                let gb = slot(&self.nodes, grads, *b);
                for ((o, gv), x) in gb.data.iter_mut().zip(&g.data).zip(&va.data) {
                    *o += gv * x;
                }
            }
            Op::Scale(a, s) => slot(&self.nodes, grads, *a).add_scaled(g, *s),
            Op::AddConst(a) => slot(&self.nodes, grads, *a).add_assign(g),
            Op::Tanh(a) => {
                let ga = slot(&self.nodes, grads, *a);
                for ((o, gv), y) in ga.data.iter_mut().zip(&g.data).zip(&node.value.data) {
                    *o += gv * (1.0 - y * y);
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                let ga = slot(&self.nodes, grads, *a);
                for ((o, gv), xv) in ga.data.iter_mut().zip(&g.data).zip(&x.data) {
                    if *xv > 0.0 {
                        *o += gv;
                    }
                }
            }
            Op::Transpose(a) => slot(&self.nodes, grads, *a).add_assign(&g.transpose()),
            Op::SoftmaxRows(a) => {
                let cols = g.cols;
                let ga = slot(&self.nodes, grads, *a);
                for r in 0..g.rows {
                    let y = &node.value.data[r * cols..(r + 1) * cols];
                    let gy = &g.data[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        ga.data[r * cols + c] += y[c] * (gy[c] - dot);
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let cols = g.cols;
                let ga = slot(&self.nodes, grads, *a);
                for r in 0..g.rows {
                    let y = &node.value.data[r * cols..(r + 1) * cols];
                    let gy = &g.data[r * cols..(r + 1) * cols];
                    let total: f64 = gy.iter().sum();
                    for c in 0..cols {
                        ga.data[r * cols + c] += gy[c] - y[c].exp() * total;
                    }
                }
            }
            Op::LayerNorm(a) => {
                let inv = node.aux.as_ref().expect("layer norm keeps 1/sigma");
                let cols = g.cols;
                let n = cols as f64;
                let ga = slot(&self.nodes, grads, *a);
                for r in 0..g.rows {
                    let y = &node.value.data[r * cols..(r + 1) * cols];
                    let gy = &g.data[r * cols..(r + 1) * cols];
                    let mean_g = gy.iter().sum::<f64>() / n;
                    let mean_gy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                    let s = inv.data[r];
                    for c in 0..cols {
                        ga.data[r * cols + c] += s * (gy[c] - mean_g - y[c] * mean_gy);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).data.len();
                    let gp = slot(&self.nodes, grads, *p);
                    for (o, v) in gp.data.iter_mut().zip(&g.data[offset..offset + len]) {
                        *o += v;
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols;
                    let gp = slot(&self.nodes, grads, *p);
                    for r in 0..g.rows {
                        for c in 0..w {
                            gp.data[r * w + c] += g.data[r * g.cols + offset + c];
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceRows(a, start) => {
                let c = g.cols;
                let ga = slot(&self.nodes, grads, *a);
                for (o, v) in ga.data[start * c..(start + g.rows) * c]
                    .iter_mut()
                    .zip(&g.data)
                {
                    *o += v;
                }
            }
            Op::SliceCols(a, start) => {
                let w = g.cols;
                let ga = slot(&self.nodes, grads, *a);
                let c = ga.cols;
                for r in 0..g.rows {
                    for k in 0..w {
                        ga.data[r * c + start + k] += g.data[r * w + k];
                    }
                }
            }
            Op::GatherRows(table, ids) => {
                let c = g.cols;
                let gt = slot(&self.nodes, grads, *table);
                for (r, &id) in ids.iter().enumerate() {
                    for k in 0..c {
                        gt.data[id * c + k] += g.data[r * c + k];
                    }
                }
            }
            Op::Sum(a) => {
                let s = g.scalar();
                slot(&self.nodes, grads, *a)
                    .data
                    .iter_mut()
                    .for_each(|o| *o += s);
            }
            Op::CrossEntropy(logits, targets) => {
                let probs = node.aux.as_ref().expect("xent keeps softmax");
                let k = probs.cols;
                let s = g.scalar() / targets.len() as f64;
                let gl = slot(&self.nodes, grads, *logits);
                for (r, &t) in targets.iter().enumerate() {
                    for c in 0..k {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        gl.data[r * k + c] += s * (probs.data[r * k + c] - onehot);
                    }
                }
            }
            Op::Precomputed(a) => {
                let pre = node.aux.as_ref().expect("precomputed gradient");
                slot(&self.nodes, grads, *a).add_scaled(pre, g.scalar());
            }
        }
    }
}

/// Result of [`finite_diff_check`].
#[derive(Debug, Clone, Default)]
pub struct FdReport {
    /// `(name, max relative error)` per parameter.
    pub entries: Vec<(String, f64)>,
    pub tol: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|(_, e)| *e < self.tol)
    }

    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// Relative error with a small floor so near-zero gradients compare
/// absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic gradients against central differences for every
/// parameter value in `store`.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    mut forward: F,
    h: f64,
    tol: f64,
) -> Result<FdReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore, forward: &mut F| -> Result<f64> {
        let mut g = Graph::new();
        let root = forward(&mut g, store)?;
        Ok(g.value(root).scalar())
    };

    let mut graph = Graph::new();
    let root = forward(&mut graph, store)?;
    let base = graph.value(root).scalar();
    if eval(store, &mut forward)?.to_bits() != base.to_bits() {
        return Err(Error::Nondeterministic(
            "two forward passes disagree".into(),
        ));
    }
    let saved: Vec<Matrix> = store.params.iter().map(|p| p.grad.clone()).collect();
    store.zero_grad();
    graph.backward(root, store)?;
    let analytic: Vec<Matrix> = store.params.iter().map(|p| p.grad.clone()).collect();
    for (p, g) in store.params.iter_mut().zip(saved) {
        p.grad = g;
    }

    let mut report = FdReport {
        entries: Vec::with_capacity(store.len()),
        tol,
    };
    for pi in 0..store.len() {
        let mut worst: f64 = 0.0;
        for k in 0..store.params[pi].value.data.len() {
            let orig = store.params[pi].value.data[k];
            store.params[pi].value.data[k] = orig + h;
            let plus = eval(store, &mut forward)?;
            store.params[pi].value.data[k] = orig - h;
            let minus = eval(store, &mut forward)?;
            store.params[pi].value.data[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic[pi].data[k], numeric));
        }
        report.entries.push((store.params[pi].name.clone(), worst));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn affine_identity_and_small_case() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::identity(2)).unwrap();
        let b = store.add_vector("b", vec![0.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let x = g.input(Matrix::identity(2));
        let (wv, bv) = (g.param(&store, w), g.param(&store, b));
        let y = g.affine(x, wv, bv).unwrap();
        assert_eq!(g.value(y), &Matrix::identity(2));

        let mut g = Graph::new();
        let x = g.input(Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap());
        let w = g.input(Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap());
        let b = g.input(Matrix::row_vector(vec![3.0]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data, vec![6.0]);
    }

    #[test]
    fn affine_shape_mismatch() {
        let mut g = Graph::new();
        let x = g.input(Matrix::zeros(2, 3));
        let w = g.input(Matrix::zeros(2, 2));
        let b = g.input(Matrix::zeros(1, 2));
        assert!(g.affine(x, w, b).is_err());
    }

    #[test]
    fn affine_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 3, 4);
        let mut store = ParamStore::new();
        let w = store.add("w", random(&mut rng, 4, 2)).unwrap();
        let b = store.add_vector("b", vec![0.1, -0.2]).unwrap();
        let report = finite_diff_check(
            &mut store,
            |g, s| {
                let xv = g.input(x.clone());
                let (wv, bv) = (g.param(s, w), g.param(s, b));
                let y = g.affine(xv, wv, bv)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn linear_model_is_nearly_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 5, 3);
        let mut store = ParamStore::new();
        let w = store.add("w", random(&mut rng, 3, 2)).unwrap();
        let report = finite_diff_check(
            &mut store,
            |g, s| {
                let xv = g.input(x.clone());
                let wv = g.param(s, w);
                let y = g.matmul(xv, wv)?;
                Ok(g.sum(y))
            },
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn xent_examples() {
        let mut g = Graph::new();
        let z = g.input(Matrix::zeros(3, 4));
        let l = g.softmax_xent(z, &[0, 2, 3]).unwrap();
        assert!((g.value(l).scalar() - 4f64.ln()).abs() < 1e-12);

        let mut logits = Matrix::zeros(1, 4);
        logits.data[1] = 1e6;
        let mut g = Graph::new();
        let z = g.input(logits);
        let l = g.softmax_xent(z, &[1]).unwrap();
        assert!(g.value(l).scalar().abs() < 1e-12);
    }

    #[test]
    fn xent_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let z = store.add("z", random(&mut rng, 4, 5)).unwrap();
        let report = finite_diff_check(
            &mut store,
            |g, s| {
                let zv = g.param(s, z);
                g.softmax_xent(zv, &[0, 4, 2, 2])
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn sum_gradient_is_ones_and_disconnected_is_zero() {
        let mut store = ParamStore::new();
        let w = store
            .add(
                "w",
                Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            )
            .unwrap();
        let u = store.add("u", Matrix::zeros(2, 2)).unwrap();
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let _uv = g.param(&store, u);
        let s = g.sum(wv);
        g.backward(s, &mut store).unwrap();
        assert_eq!(store.get(w).grad.data, vec![1.0; 4]);
        assert_eq!(store.get(u).grad.data, vec![0.0; 4]);
        g.backward(s, &mut store).unwrap();
        assert_eq!(store.get(w).grad.data, vec![2.0; 4], "backward accumulates");
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(Matrix::zeros(2, 2));
        assert!(g.backward(x, &mut store).is_err());
    }

    #[test]
    fn chained_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, 4, 3);
        let mut store = ParamStore::new();
        let w1 = store.add("w1", random(&mut rng, 3, 6)).unwrap();
        let b1 = store.add_vector("b1", vec![0.05; 6]).unwrap();
        let w2 = store.add("w2", random(&mut rng, 6, 6)).unwrap();
        let emb = store.add("emb", random(&mut rng, 5, 6)).unwrap();
        let w3 = store.add("w3", random(&mut rng, 6, 5)).unwrap();
        let report = finite_diff_check(
            &mut store,
            |g, s| {
                let xv = g.input(x.clone());
                let (w1v, b1v) = (g.param(s, w1), g.param(s, b1));
                let h = g.affine(xv, w1v, b1v)?;
                let h = g.tanh(h);
                let e = g.param(s, emb);
                let rows = g.gather_rows(e, &[1, 3, 3, 0])?;
                let h = g.add(h, rows)?;
                let h = g.layer_norm(h);
                let w2v = g.param(s, w2);
                let q = g.matmul(h, w2v)?;
                let kt = g.transpose(h);
                let scores = g.matmul(q, kt)?;
                let scores2 = g.matmul_nt(q, h)?;
                let scores = g.add(scores, scores2)?;
                let att = g.softmax_rows(scores);
                let ctx = g.matmul(att, h)?;
                let left = g.slice_cols(ctx, 0, 3)?;
                let right = g.slice_cols(h, 3, 6)?;
                let joined = g.concat_cols(&[left, right])?;
                let gate = g.sigmoid(joined);
                let r = g.relu(joined);
                let mixed = g.mul(gate, r)?;
                let top = g.slice_rows(mixed, 0, 2)?;
                let bottom = g.slice_rows(mixed, 2, 4)?;
                let stacked = g.concat_rows(&[bottom, top])?;
                let w3v = g.param(s, w3);
                let logits = g.matmul(stacked, w3v)?;
                let lp = g.log_softmax_rows(logits);
                let pick = g.slice_cols(lp, 2, 3)?;
                let a = g.mean(pick);
                let b = g.softmax_xent(logits, &[1, 0, 4, 2])?;
                let a = g.scale(a, -0.5);
                g.add(a, b)
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn empty_closure_passes() {
        let mut store = ParamStore::new();
        let report = finite_diff_check(
            &mut store,
            |g, _| {
                let x = g.input(Matrix::row_vector(vec![1.0]));
                Ok(g.sum(x))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.entries.is_empty());
        assert!(report.passed());
    }

    #[test]
    fn nondeterministic_forward_is_detected() {
        let mut store = ParamStore::new();
        let mut calls = 0.0;
        let err = finite_diff_check(
            &mut store,
            |g, _| {
                calls += 1.0;
                let x = g.input(Matrix::row_vector(vec![calls]));
                Ok(g.sum(x))
            },
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Nondeterministic(_)));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::new();
        let w = store.add_vector("w", vec![1.0, -1.0]).unwrap();
        store.get_mut(w).grad.data = vec![2.0, -3.0];
        store.adam_step(&AdamConfig::default()).unwrap();
        let v = &store.get(w).value.data;
        assert!((v[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((v[1] - (-1.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(store.get(w).grad.data, vec![0.0, 0.0]);
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut store = ParamStore::new();
        let w = store.add_vector("lm.w", vec![1.0]).unwrap();
        store.set_frozen("lm.", true);
        store.get_mut(w).grad.data = vec![1.0];
        store.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(store.get(w).value.data, vec![1.0]);
    }

    #[test]
    fn checkpoint_round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let mut store = ParamStore::new();
        store
            .add("w", Matrix::from_vec(2, 1, vec![1.5, -2.0]).unwrap())
            .unwrap();
        store.add_vector("b", vec![0.25]).unwrap();
        store.save(&path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let mut expected = b"SARP".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(b"w");
        expected.extend(2u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(1.5f64.to_le_bytes());
        expected.extend((-2.0f64).to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(b"b");
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(0.25f64.to_le_bytes());
        assert_eq!(bytes, expected);

        let back = ParamStore::load(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(
            back.get(back.id("w").unwrap()).value,
            store.get(ParamId(0)).value
        );
        assert!(back.get(back.id("b").unwrap()).vector);

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match ParamStore::load(&path).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset as usize, bytes.len() - 8),
            e => panic!("unexpected {e}"),
        }
    }
}

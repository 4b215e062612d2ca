//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar result walks the tape in reverse and returns
//! a [`Gradients`] table holding the adjoint of every recorded node. The tape
//! itself is never mutated by `backward`, so repeated calls produce identical
//! gradients.
//!
//! Tensors are row-major. Most operations work on a matrix view of a tensor:
//! the last axis is the column axis and all leading axes fold into rows.

use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor shape {shape:?} holds {expected} values but {actual} were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor. Values are immutable once constructed.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(AutodiffError::InvalidArgument {
                op: "tensor",
                detail: format!("shape {shape:?} must have positive dimensions"),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: "tensor" });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// `rows × cols` matrix from row-major values.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Column vector (`n × 1`).
    pub fn column(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n, 1], data)
    }

    /// Row vector (`1 × n`).
    pub fn row(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![1, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows in the matrix view.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Number of columns in the matrix view (size of the last axis).
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

/// Naive matrix product `a · b` (or `a · bᵀ` when `transpose_b`).
fn matmul_raw(a: &Tensor, b: &Tensor, transpose_b: bool) -> Vec<f64> {
    let (m, k) = (a.rows(), a.cols());
    let n = if transpose_b { b.rows() } else { b.cols() };
    let mut out = vec![0.0; m * n];
    if transpose_b {
        for i in 0..m {
            let arow = &a.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b.data[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
    } else {
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b.data[p * n..(p + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

/// `aᵀ · b` for matrices with equal row counts.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    let mut out = vec![0.0; k * n];
    for r in 0..m {
        let arow = &a.data[r * k..(r + 1) * k];
        let brow = &b.data[r * n..(r + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Broadcast {
    Full,
    Row,
    Column,
    Scalar,
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape == b.shape {
        return Ok(Broadcast::Full);
    }
    if b.len() == 1 {
        return Ok(Broadcast::Scalar);
    }
    if b.rows() == 1 && b.cols() == a.cols() {
        return Ok(Broadcast::Row);
    }
    if b.cols() == 1 && b.rows() == a.rows() {
        return Ok(Broadcast::Column);
    }
    Err(AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    })
}

fn broadcast_index(kind: Broadcast, idx: usize, cols: usize) -> usize {
    match kind {
        Broadcast::Full => idx,
        Broadcast::Row => idx % cols,
        Broadcast::Column => idx / cols,
        Broadcast::Scalar => 0,
    }
}

/// Reduce a full-shape adjoint back onto the broadcast operand.
fn unbroadcast(kind: Broadcast, grad: Vec<f64>, cols: usize, target: &[usize]) -> Tensor {
    match kind {
        Broadcast::Full => Tensor::from_parts(target.to_vec(), grad),
        _ => {
            let n: usize = target.iter().product();
            let mut out = vec![0.0; n];
            for (i, g) in grad.into_iter().enumerate() {
                out[broadcast_index(kind, i, cols)] += g;
            }
            Tensor::from_parts(target.to_vec(), out)
        }
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Scale(usize, f64),
    ConcatCols(Vec<usize>),
    SliceCols {
        input: usize,
        start: usize,
        end: usize,
    },
    GatherRows {
        input: usize,
        index: Arc<[usize]>,
    },
    LeakyRelu {
        input: usize,
        slope: f64,
    },
    Relu(usize),
    SegmentSoftmax {
        input: usize,
        segments: Arc<[usize]>,
    },
    SegmentSum {
        input: usize,
        segments: Arc<[usize]>,
    },
    MeanRows(usize),
    Dropout {
        input: usize,
        mask: Arc<[f64]>,
    },
    SquaredError {
        input: usize,
        target: Arc<[f64]>,
    },
    SumAll(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Relu(_) => "relu",
            Op::SegmentSoftmax { .. } => "segment_softmax",
            Op::SegmentSum { .. } => "segment_sum",
            Op::MeanRows(_) => "mean_rows",
            Op::Dropout { .. } => "dropout",
            Op::SquaredError { .. } => "squared_error",
            Op::SumAll(_) => "sum_all",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Records a computation graph. Node ids are assigned in creation order, so
/// every node's inputs have smaller ids and the graph is acyclic by
/// construction.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Register a leaf (parameter or constant input).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    fn push(&self, op: Op, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push_checked(&self, op: Op, value: Tensor) -> Result<Var<'_>> {
        if value.data.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        Ok(self.push(op, value))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(root.value.shape.clone()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; nodes.len()];
        adj[loss.id] = Some(Tensor::filled(&root.value.shape, 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            let value = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    // dA = G · Bᵀ, dB = Aᵀ · G
                    let (av, bv) = (value(*a), value(*b));
                    let da = matmul_raw(&g, bv, true);
                    let db = matmul_tn(av, &g);
                    accumulate(&mut adj, *a, &av.shape, da);
                    accumulate(&mut adj, *b, &bv.shape, db);
                }
                Op::MatMulT(a, b) => {
                    // C = A · Bᵀ: dA = G · B, dB = Gᵀ · A
                    let (av, bv) = (value(*a), value(*b));
                    let da = matmul_raw(&g, bv, false);
                    let db = matmul_tn(&g, av);
                    accumulate(&mut adj, *a, &av.shape, da);
                    accumulate(&mut adj, *b, &bv.shape, db);
                }
                Op::Add(a, b, kind) => {
                    let bshape = value(*b).shape.clone();
                    let cols = g.cols();
                    accumulate(&mut adj, *a, &g.shape.clone(), g.data.clone());
                    let gb = unbroadcast(*kind, g.data.clone(), cols, &bshape);
                    accumulate(&mut adj, *b, &bshape, gb.data);
                }
                Op::Mul(a, b, kind) => {
                    let (av, bv) = (value(*a), value(*b));
                    let cols = g.cols();
                    let da: Vec<f64> = g
                        .data
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * bv.data[broadcast_index(*kind, i, cols)])
                        .collect();
                    let full: Vec<f64> = g.data.iter().zip(&av.data).map(|(gi, x)| gi * x).collect();
                    let gb = unbroadcast(*kind, full, cols, &bv.shape);
                    accumulate(&mut adj, *a, &av.shape, da);
                    accumulate(&mut adj, *b, &bv.shape, gb.data);
                }
                Op::Scale(a, c) => {
                    let da = g.data.iter().map(|x| x * c).collect();
                    accumulate(&mut adj, *a, &g.shape, da);
                }
                Op::ConcatCols(inputs) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for &i in inputs {
                        let shape = value(i).shape.clone();
                        let c = *shape.last().unwrap();
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data[r * total + offset..r * total + offset + c]);
                        }
                        accumulate(&mut adj, i, &shape, d);
                        offset += c;
                    }
                }
                Op::SliceCols { input, start, end } => {
                    let iv = value(*input);
                    let cols = iv.cols();
                    let width = end - start;
                    let mut d = vec![0.0; iv.len()];
                    for r in 0..iv.rows() {
                        d[r * cols + start..r * cols + end]
                            .copy_from_slice(&g.data[r * width..(r + 1) * width]);
                    }
                    accumulate(&mut adj, *input, &iv.shape.clone(), d);
                }
                Op::GatherRows { input, index } => {
                    let iv = value(*input);
                    let cols = iv.cols();
                    let mut d = vec![0.0; iv.len()];
                    for (r, &src) in index.iter().enumerate() {
                        for c in 0..cols {
                            d[src * cols + c] += g.data[r * cols + c];
                        }
                    }
                    accumulate(&mut adj, *input, &iv.shape.clone(), d);
                }
                Op::LeakyRelu { input, slope } => {
                    let iv = value(*input);
                    let d = g
                        .data
                        .iter()
                        .zip(&iv.data)
                        .map(|(gi, x)| if *x > 0.0 { *gi } else { gi * slope })
                        .collect();
                    accumulate(&mut adj, *input, &iv.shape.clone(), d);
                }
                Op::Relu(input) => {
                    let iv = value(*input);
                    let d = g
                        .data
                        .iter()
                        .zip(&iv.data)
                        .map(|(gi, x)| if *x > 0.0 { *gi } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, *input, &iv.shape.clone(), d);
                }
                Op::SegmentSoftmax { input, segments } => {
                    // dx_i = y_i (dy_i − Σ_{j∈seg(i)} y_j dy_j)
                    let y = &node.value;
                    let nseg = segments.iter().copied().max().map_or(0, |m| m + 1);
                    let mut dot = vec![0.0; nseg];
                    for (i, &s) in segments.iter().enumerate() {
                        dot[s] += y.data[i] * g.data[i];
                    }
                    let d = segments
                        .iter()
                        .enumerate()
                        .map(|(i, &s)| y.data[i] * (g.data[i] - dot[s]))
                        .collect();
                    accumulate(&mut adj, *input, &value(*input).shape.clone(), d);
                }
                Op::SegmentSum { input, segments } => {
                    let iv = value(*input);
                    let cols = iv.cols();
                    let mut d = vec![0.0; iv.len()];
                    for (r, &s) in segments.iter().enumerate() {
                        d[r * cols..(r + 1) * cols].copy_from_slice(&g.data[s * cols..(s + 1) * cols]);
                    }
                    accumulate(&mut adj, *input, &iv.shape.clone(), d);
                }
                Op::MeanRows(input) => {
                    let iv = value(*input);
                    let rows = iv.rows();
                    let cols = iv.cols();
                    let inv = 1.0 / rows as f64;
                    let mut d = Vec::with_capacity(iv.len());
                    for _ in 0..rows {
                        d.extend(g.data.iter().take(cols).map(|x| x * inv));
                    }
                    accumulate(&mut adj, *input, &iv.shape.clone(), d);
                }
                Op::Dropout { input, mask } => {
                    let d = g.data.iter().zip(mask.iter()).map(|(gi, m)| gi * m).collect();
                    accumulate(&mut adj, *input, &value(*input).shape.clone(), d);
                }
                Op::SquaredError { input, target } => {
                    let iv = value(*input);
                    let n = iv.len() as f64;
                    let g0 = g.data[0];
                    let d = iv
                        .data
                        .iter()
                        .zip(target.iter())
                        .map(|(x, t)| g0 * 2.0 * (x - t) / n)
                        .collect();
                    accumulate(&mut adj, *input, &iv.shape.clone(), d);
                }
                Op::SumAll(input) => {
                    let iv = value(*input);
                    let d = vec![g.data[0]; iv.len()];
                    accumulate(&mut adj, *input, &iv.shape.clone(), d);
                }
            }
            adj[id] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }
}

fn accumulate(adj: &mut [Option<Tensor>], id: usize, shape: &[usize], grad: Vec<f64>) {
    match &mut adj[id] {
        Some(t) => {
            for (a, g) in t.data.iter_mut().zip(grad) {
                *a += g;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), grad)),
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when `var` does not
    /// influence the loss.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.adjoints.get(var.id).and_then(|a| a.as_ref()) {
            Some(t) => t.clone(),
            None => Tensor::zeros(&var.shape()),
        }
    }
}

fn segment_count(op: &'static str, segments: &[usize], rows: usize) -> Result<usize> {
    if segments.len() != rows {
        return Err(AutodiffError::InvalidArgument {
            op,
            detail: format!("{} segment ids for {rows} rows", segments.len()),
        });
    }
    Ok(segments.iter().copied().max().map_or(0, |m| m + 1))
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape.clone()
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    fn with<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn with2<R>(&self, other: Var<'t>, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.id].value, &nodes[other.id].value)
    }

    /// Matrix product `self · other`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.with2(other, |a, b| {
            if a.cols() != b.rows() || b.shape.len() != 2 {
                return Err(AutodiffError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            Ok(Tensor::from_parts(vec![a.rows(), b.cols()], matmul_raw(a, b, false)))
        })?;
        self.tape.push_checked(Op::MatMul(self.id, other.id), value)
    }

    /// Matrix product with the transpose of `other`: `self · otherᵀ`.
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.with2(other, |a, b| {
            if a.cols() != b.cols() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "matmul_t",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            Ok(Tensor::from_parts(vec![a.rows(), b.rows()], matmul_raw(a, b, true)))
        })?;
        self.tape.push_checked(Op::MatMulT(self.id, other.id), value)
    }

    /// Elementwise sum; `other` may broadcast as a row, a column or a scalar.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (kind, value) = self.with2(other, |a, b| {
            let kind = broadcast_kind("add", a, b)?;
            let cols = a.cols();
            let data = a
                .data
                .iter()
                .enumerate()
                .map(|(i, x)| x + b.data[broadcast_index(kind, i, cols)])
                .collect();
            Ok((kind, Tensor::from_parts(a.shape.clone(), data)))
        })?;
        self.tape.push_checked(Op::Add(self.id, other.id, kind), value)
    }

    /// Elementwise product; `other` may broadcast as a row, a column or a scalar.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (kind, value) = self.with2(other, |a, b| {
            let kind = broadcast_kind("mul", a, b)?;
            let cols = a.cols();
            let data = a
                .data
                .iter()
                .enumerate()
                .map(|(i, x)| x * b.data[broadcast_index(kind, i, cols)])
                .collect();
            Ok((kind, Tensor::from_parts(a.shape.clone(), data)))
        })?;
        self.tape.push_checked(Op::Mul(self.id, other.id, kind), value)
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        let value = self.with(|a| {
            Tensor::from_parts(a.shape.clone(), a.data.iter().map(|x| x * factor).collect())
        });
        self.tape.push_checked(Op::Scale(self.id, factor), value)
    }

    /// Concatenate along the last axis. All parts must share the row count.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(AutodiffError::InvalidArgument {
            op: "concat_cols",
            detail: "no inputs".into(),
        })?;
        let tape = first.tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let rows = nodes[first.id].value.rows();
            for p in parts {
                let v = &nodes[p.id].value;
                if v.rows() != rows {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "concat_cols",
                        lhs: nodes[first.id].value.shape.clone(),
                        rhs: v.shape.clone(),
                    });
                }
            }
            let total: usize = parts.iter().map(|p| nodes[p.id].value.cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    let v = &nodes[p.id].value;
                    let c = v.cols();
                    data.extend_from_slice(&v.data[r * c..(r + 1) * c]);
                }
            }
            Tensor::from_parts(vec![rows, total], data)
        };
        tape.push_checked(Op::ConcatCols(parts.iter().map(|p| p.id).collect()), value)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let value = self.with(|a| {
            let cols = a.cols();
            if start >= end || end > cols {
                return Err(AutodiffError::InvalidArgument {
                    op: "slice_cols",
                    detail: format!("range {start}..{end} outside {cols} columns"),
                });
            }
            let rows = a.rows();
            let mut data = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                data.extend_from_slice(&a.data[r * cols + start..r * cols + end]);
            }
            Ok(Tensor::from_parts(vec![rows, end - start], data))
        })?;
        self.tape.push_checked(Op::SliceCols { input: self.id, start, end }, value)
    }

    /// Row `i` of the output is row `index[i]` of the input.
    pub fn gather_rows(self, index: Arc<[usize]>) -> Result<Var<'t>> {
        let value = self.with(|a| {
            let (rows, cols) = (a.rows(), a.cols());
            if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
                return Err(AutodiffError::InvalidArgument {
                    op: "gather_rows",
                    detail: format!("row {bad} out of range for {rows} rows"),
                });
            }
            if index.is_empty() {
                return Err(AutodiffError::InvalidArgument {
                    op: "gather_rows",
                    detail: "empty index".into(),
                });
            }
            let mut data = Vec::with_capacity(index.len() * cols);
            for &i in index.iter() {
                data.extend_from_slice(&a.data[i * cols..(i + 1) * cols]);
            }
            Ok(Tensor::from_parts(vec![index.len(), cols], data))
        })?;
        self.tape.push_checked(Op::GatherRows { input: self.id, index }, value)
    }

    pub fn leaky_relu(self, slope: f64) -> Result<Var<'t>> {
        let value = self.with(|a| {
            Tensor::from_parts(
                a.shape.clone(),
                a.data.iter().map(|&x| if x > 0.0 { x } else { slope * x }).collect(),
            )
        });
        self.tape.push_checked(Op::LeakyRelu { input: self.id, slope }, value)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let value = self.with(|a| {
            Tensor::from_parts(a.shape.clone(), a.data.iter().map(|&x| x.max(0.0)).collect())
        });
        self.tape.push_checked(Op::Relu(self.id), value)
    }

    /// Softmax over groups of entries of a column vector; `segments[i]` is
    /// the group of entry `i`.
    pub fn segment_softmax(self, segments: Arc<[usize]>) -> Result<Var<'t>> {
        let value = self.with(|a| {
            if a.cols() != 1 {
                return Err(AutodiffError::InvalidArgument {
                    op: "segment_softmax",
                    detail: format!("expects a column vector, got {:?}", a.shape),
                });
            }
            let nseg = segment_count("segment_softmax", &segments, a.rows())?;
            let mut max = vec![f64::NEG_INFINITY; nseg];
            for (x, &s) in a.data.iter().zip(segments.iter()) {
                max[s] = max[s].max(*x);
            }
            let mut sum = vec![0.0; nseg];
            let mut exp: Vec<f64> = a
                .data
                .iter()
                .zip(segments.iter())
                .map(|(x, &s)| {
                    let e = (x - max[s]).exp();
                    sum[s] += e;
                    e
                })
                .collect();
            for (e, &s) in exp.iter_mut().zip(segments.iter()) {
                *e /= sum[s];
            }
            Ok(Tensor::from_parts(a.shape.clone(), exp))
        })?;
        self.tape
            .push_checked(Op::SegmentSoftmax { input: self.id, segments }, value)
    }

    /// Sum rows into `num_segments` groups; row `i` goes to `segments[i]`.
    pub fn segment_sum(self, segments: Arc<[usize]>, num_segments: usize) -> Result<Var<'t>> {
        let value = self.with(|a| {
            let needed = segment_count("segment_sum", &segments, a.rows())?;
            if needed > num_segments {
                return Err(AutodiffError::InvalidArgument {
                    op: "segment_sum",
                    detail: format!("segment id {} >= {num_segments}", needed - 1),
                });
            }
            let cols = a.cols();
            let mut data = vec![0.0; num_segments * cols];
            for (r, &s) in segments.iter().enumerate() {
                for c in 0..cols {
                    data[s * cols + c] += a.data[r * cols + c];
                }
            }
            Ok(Tensor::from_parts(vec![num_segments, cols], data))
        })?;
        self.tape.push_checked(Op::SegmentSum { input: self.id, segments }, value)
    }

    /// Mean over the first (row) axis: `n × d → 1 × d`.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        let value = self.with(|a| {
            let (rows, cols) = (a.rows(), a.cols());
            let mut data = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    data[c] += a.data[r * cols + c];
                }
            }
            for d in &mut data {
                *d /= rows as f64;
            }
            Tensor::from_parts(vec![1, cols], data)
        });
        self.tape.push_checked(Op::MeanRows(self.id), value)
    }

    /// Multiply by a precomputed dropout mask (entries are `0` or `1/(1−p)`).
    pub fn dropout(self, mask: Arc<[f64]>) -> Result<Var<'t>> {
        let value = self.with(|a| {
            if mask.len() != a.len() {
                return Err(AutodiffError::InvalidArgument {
                    op: "dropout",
                    detail: format!("mask of {} for {} values", mask.len(), a.len()),
                });
            }
            Ok(Tensor::from_parts(
                a.shape.clone(),
                a.data.iter().zip(mask.iter()).map(|(x, m)| x * m).collect(),
            ))
        })?;
        self.tape.push_checked(Op::Dropout { input: self.id, mask }, value)
    }

    /// Mean squared difference to a constant target, as a `1 × 1` scalar.
    pub fn squared_error(self, target: &[f64]) -> Result<Var<'t>> {
        let value = self.with(|a| {
            if target.len() != a.len() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "squared_error",
                    lhs: a.shape.clone(),
                    rhs: vec![target.len()],
                });
            }
            let n = a.len() as f64;
            let s: f64 = a.data.iter().zip(target).map(|(x, t)| (x - t) * (x - t)).sum();
            Ok(Tensor::scalar(s / n))
        })?;
        self.tape.push_checked(
            Op::SquaredError {
                input: self.id,
                target: target.into(),
            },
            value,
        )
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        let value = self.with(|a| Tensor::scalar(a.data.iter().sum()));
        self.tape.push_checked(Op::SumAll(self.id), value)
    }
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub relative_error: Vec<f64>,
    pub tolerance: f64,
    /// Coordinates whose relative error exceeds the tolerance.
    pub failures: Vec<usize>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn max_relative_error(&self) -> f64 {
        self.relative_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Relative error with a small absolute floor so coordinates whose true
/// gradient is zero compare on absolute terms.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

/// Compare the analytic gradient returned by `f` against central differences.
///
/// `f` maps a point to `(value, analytic gradient)`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    let (value, analytic) = f(point)?;
    if !value.is_finite() {
        return Err(AutodiffError::NonFinite { op: "grad_check" });
    }
    grad_check_against(|p| Ok(f(p)?.0), analytic, point, step, tol)
}

/// Like [`grad_check`] with the analytic gradient supplied up front, so the
/// probes only evaluate `value`.
pub fn grad_check_against<F>(value: F, analytic: Tensor, point: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if analytic.len() != point.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "grad_check",
            lhs: point.shape.clone(),
            rhs: analytic.shape.clone(),
        });
    }
    let mut numeric = Vec::with_capacity(point.len());
    let mut probe = point.data.clone();
    for i in 0..point.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = value(&Tensor::from_parts(point.shape.clone(), probe.clone()))?;
        probe[i] = orig - step;
        let minus = value(&Tensor::from_parts(point.shape.clone(), probe.clone()))?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(AutodiffError::NonFinite { op: "grad_check" });
        }
        numeric.push((plus - minus) / (2.0 * step));
    }
    let relative: Vec<f64> = analytic
        .data
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .collect();
    let failures = relative
        .iter()
        .enumerate()
        .filter(|(_, e)| **e >= tol)
        .map(|(i, _)| i)
        .collect();
    Ok(GradCheckReport {
        analytic: analytic.data,
        numeric,
        relative_error: relative,
        tolerance: tol,
        failures,
    })
}

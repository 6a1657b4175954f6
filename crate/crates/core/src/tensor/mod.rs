//! Minimal reverse-mode automatic differentiation over dense row-major arrays.
//!
//! A [`Graph`] is a tape: every operation appends a node whose inputs have
//! smaller indices, so the node order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep.

mod check;
mod grad;
pub(crate) mod kernels;

pub use check::{finite_difference_check, GradCheck, GradCheckReport};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    ShapeMismatch { shape: Vec<usize>, len: usize },
}

/// Dense array of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(TensorError::ShapeMismatch { shape, len: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![], data: vec![x] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Tensor { shape: vec![rows, cols], data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix over the last axis.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.data.len() / self.cols().max(1),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    /// `out[j] = x[j] + ... + x[j+w-1]`
    Ahead,
    /// `out[j] = x[j-w+1] + ... + x[j]`
    Behind,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    ScaleBy(Var, Var),
    ShiftBy(Var, Var),
    AddRow(Var, Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    MulConst(Var, Vec<f64>),
    AddConst(Var),
    Sum(Var),
    L2Norm(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    Slice(Var, usize),
    Reshape(Var),
    CumSum(Var),
    CumProdExcl(Var),
    MonotonicScan { p: Var, prev: Var, q: Vec<f64> },
    ChunkSoftmax { alpha: Var, u: Var, w: usize, lse: Vec<f64> },
    MovingSum(Var, usize, Window),
    Conv1d { x: Var, w: Var, k: usize, d_in: usize, d_out: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<f64>>,
}

/// Tape of operations. Build the forward pass with the op methods, then call
/// [`Graph::backward`] on a scalar.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.nodes[a.0].value;
        let data = t.data.iter().map(|&x| f(x)).collect();
        let value = Tensor { shape: t.shape.clone(), data };
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape, tb.shape, "elementwise shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor { shape: ta.shape.clone(), data };
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `scale * a + shift` with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.unary(a, |x| scale * x + shift, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    /// Multiply every element of `a` by the scalar node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let rg = self.rg(a) || self.rg(s);
        let t = &self.nodes[a.0].value;
        let value = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&x| x * k).collect() };
        self.push(value, Op::ScaleBy(a, s), rg)
    }

    /// Add the scalar node `s` to every element of `a`.
    pub fn shift_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let rg = self.rg(a) || self.rg(s);
        let t = &self.nodes[a.0].value;
        let value = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&x| x + k).collect() };
        self.push(value, Op::ShiftBy(a, s), rg)
    }

    /// Broadcast-add vector `v` to every row of `m`.
    pub fn add_row(&mut self, m: Var, v: Var) -> Var {
        let (tm, tv) = (&self.nodes[m.0].value, &self.nodes[v.0].value);
        let c = tm.cols();
        assert_eq!(c, tv.len(), "add_row width mismatch");
        let mut data = tm.data.clone();
        for row in data.chunks_mut(c.max(1)) {
            for (x, &y) in row.iter_mut().zip(&tv.data) {
                *x += y;
            }
        }
        let value = Tensor { shape: tm.shape.clone(), data };
        let rg = self.rg(m) || self.rg(v);
        self.push(value, Op::AddRow(m, v), rg)
    }

    /// Matrix product. A 1-D left operand is a row vector and a 1-D right
    /// operand is a column vector; the result drops the corresponding axis.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k, a_vec) = match ta.shape.as_slice() {
            [k] => (1, *k, true),
            [m, k] => (*m, *k, false),
            s => panic!("matmul lhs must be 1-D or 2-D, got {s:?}"),
        };
        let (k2, n, b_vec) = match tb.shape.as_slice() {
            [k] => (*k, 1, true),
            [k, n] => (*k, *n, false),
            s => panic!("matmul rhs must be 1-D or 2-D, got {s:?}"),
        };
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let data = kernels::matmul(&ta.data, &tb.data, m, k, n);
        let shape = match (a_vec, b_vec) {
            (true, true) => vec![],
            (true, false) => vec![n],
            (false, true) => vec![m],
            (false, false) => vec![m, n],
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor { shape, data }, Op::MatMul { a, b, m, k, n }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// Absolute value; subgradient 0 at the kink.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Clamp into `[lo, hi]`; gradient is zero where clamped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Elementwise product with a constant mask.
    pub fn mul_const(&mut self, a: Var, mask: &[f64]) -> Var {
        let t = &self.nodes[a.0].value;
        assert_eq!(t.len(), mask.len(), "mask length mismatch");
        let data = t.data.iter().zip(mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor { shape: t.shape.clone(), data };
        let rg = self.rg(a);
        self.push(value, Op::MulConst(a, mask.to_vec()), rg)
    }

    /// Elementwise sum with a constant.
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Var {
        let t = &self.nodes[a.0].value;
        assert_eq!(t.len(), c.len(), "constant length mismatch");
        let data = t.data.iter().zip(c).map(|(&x, &y)| x + y).collect();
        let value = Tensor { shape: t.shape.clone(), data };
        let rg = self.rg(a);
        self.push(value, Op::AddConst(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum(p)
    }

    pub fn l2_norm(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::L2Norm(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let c = t.cols();
        let mut data = t.data.clone();
        for row in data.chunks_mut(c.max(1)) {
            kernels::softmax_in_place(row);
        }
        let value = Tensor { shape: t.shape.clone(), data };
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a, c), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let c = t.cols();
        let mut data = t.data.clone();
        for row in data.chunks_mut(c.max(1)) {
            kernels::log_softmax_in_place(row);
        }
        let value = Tensor { shape: t.shape.clone(), data };
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmax(a, c), rg)
    }

    /// Flat concatenation into a 1-D tensor.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].value.data);
            rg |= self.rg(p);
        }
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), rg)
    }

    /// Concatenate matrices with equal row counts along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = self.nodes[parts[0].0].value.rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].value.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        let mut rg = false;
        for &p in parts {
            assert_eq!(self.nodes[p.0].value.rows(), rows, "concat_cols row mismatch");
            rg |= self.rg(p);
        }
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        self.push(Tensor::matrix(rows, total, data), Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Stack equally sized vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack_rows needs at least one row");
        let c = self.nodes[rows[0].0].value.len();
        let flat = self.concat(rows);
        self.reshape(flat, &[rows.len(), c])
    }

    /// Contiguous flat slice `[offset, offset+len)` as a 1-D tensor.
    pub fn slice(&mut self, a: Var, offset: usize, len: usize) -> Var {
        let data = self.nodes[a.0].value.data[offset..offset + len].to_vec();
        let rg = self.rg(a);
        self.push(Tensor::vector(data), Op::Slice(a, offset), rg)
    }

    /// Row `r` of a matrix as a vector.
    pub fn row(&mut self, a: Var, r: usize) -> Var {
        let c = self.nodes[a.0].value.cols();
        self.slice(a, r * c, c)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = &self.nodes[a.0].value;
        assert_eq!(shape.iter().product::<usize>(), t.len(), "reshape size mismatch");
        let value = Tensor { shape: shape.to_vec(), data: t.data.clone() };
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Inclusive cumulative sum of a vector.
    pub fn cumsum(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let mut acc = 0.0;
        let data = t
            .data
            .iter()
            .map(|&x| {
                acc += x;
                acc
            })
            .collect();
        let value = Tensor { shape: t.shape.clone(), data };
        let rg = self.rg(a);
        self.push(value, Op::CumSum(a), rg)
    }

    /// `out[j] = x[0] * ... * x[j-1]`, with `out[0] = 1`.
    pub fn cumprod_exclusive(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let data = kernels::cumprod_exclusive(&t.data);
        let value = Tensor { shape: t.shape.clone(), data };
        let rg = self.rg(a);
        self.push(value, Op::CumProdExcl(a), rg)
    }

    /// `y_j = p_j q_j` with `q_1 = a_1`, `q_j = (1 - p_{j-1}) q_{j-1} + a_j`: the
    /// monotonic alignment recursion evaluated left to right, without division.
    pub fn monotonic_scan(&mut self, p: Var, prev: Var) -> Var {
        let (tp, ta) = (&self.nodes[p.0].value, &self.nodes[prev.0].value);
        assert_eq!(tp.shape, ta.shape, "monotonic_scan shape mismatch");
        let (data, q) = kernels::monotonic_scan(&tp.data, &ta.data);
        let value = Tensor { shape: tp.shape.clone(), data };
        let rg = self.rg(p) || self.rg(prev);
        self.push(value, Op::MonotonicScan { p, prev, q }, rg)
    }

    /// `out_j = sum_{k=j}^{j+w-1} alpha_k exp(u_j) / sum_{l=k-w+1}^{k} exp(u_l)`,
    /// windows truncated at the edges, each window normalized by its own
    /// log-sum-exp.
    pub fn chunk_softmax(&mut self, alpha: Var, u: Var, w: usize) -> Var {
        assert!(w >= 1, "chunk width must be >= 1");
        let (ta, tu) = (&self.nodes[alpha.0].value, &self.nodes[u.0].value);
        assert_eq!(ta.shape, tu.shape, "chunk_softmax shape mismatch");
        let (data, lse) = kernels::chunk_softmax(&ta.data, &tu.data, w);
        let value = Tensor { shape: ta.shape.clone(), data };
        let rg = self.rg(alpha) || self.rg(u);
        self.push(value, Op::ChunkSoftmax { alpha, u, w, lse }, rg)
    }

    /// Windowed sum of width `w`, truncated at the sequence edges.
    pub fn moving_sum(&mut self, a: Var, w: usize, window: Window) -> Var {
        assert!(w >= 1, "moving_sum window must be >= 1");
        let t = &self.nodes[a.0].value;
        let data = kernels::moving_sum(&t.data, w, window);
        let value = Tensor { shape: t.shape.clone(), data };
        let rg = self.rg(a);
        self.push(value, Op::MovingSum(a, w, window), rg)
    }

    /// Same-length 1-D convolution over time with zero padding.
    ///
    /// `x` is `T x d_in`, `w` is `k x d_out x d_in` with odd `k`; output row
    /// `t` reads input rows `t - k/2 ..= t + k/2`.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Var {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (k, d_out, d_in) = match tw.shape.as_slice() {
            [k, o, i] => (*k, *o, *i),
            s => panic!("conv1d kernel must be 3-D, got {s:?}"),
        };
        assert!(k % 2 == 1, "conv1d kernel size must be odd");
        assert_eq!(tx.cols(), d_in, "conv1d channel mismatch");
        let steps = tx.rows();
        let data = kernels::conv1d(&tx.data, &tw.data, steps, k, d_in, d_out);
        let rg = self.rg(x) || self.rg(w);
        self.push(Tensor::matrix(steps, d_out, data), Op::Conv1d { x, w, k, d_in, d_out }, rg)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (tx, tg, tb) =
            (&self.nodes[x.0].value, &self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let c = tx.cols();
        assert_eq!(tg.len(), c, "layer_norm gain width");
        assert_eq!(tb.len(), c, "layer_norm bias width");
        let mut out = vec![0.0; tx.len()];
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = Vec::with_capacity(tx.rows());
        for (r, row) in tx.data.chunks(c.max(1)).enumerate() {
            let s = kernels::layer_norm_row(
                row,
                &tg.data,
                &tb.data,
                eps,
                &mut xhat[r * c..(r + 1) * c],
                &mut out[r * c..(r + 1) * c],
            );
            rstd.push(s);
        }
        let value = Tensor { shape: tx.shape.clone(), data: out };
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }
}

//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] is an append-only arena of nodes. Every operation pushes a node
//! holding its forward value and references to its inputs, so creation order
//! is a topological order and [`Tape::backward`] can sweep the arena once in
//! reverse. Leaves created with [`Tape::param`] own persistent gradient
//! accumulators; repeated `backward` calls add into them until
//! [`Tape::zero_grad`].
//!
//! Broadcasting is limited to scalar-tensor pairs in `add`/`sub`/`mul`. Row
//! biases go through the explicit [`Tape::add_row`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// sqrt(2/pi), used by the tanh form of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.7978845608;
const GELU_CUBIC: f64 = 0.044715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Detach(Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Gelu(Var),
    Tanh(Var),
    Concat(Var, Var),
    AddRow(Var, Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Row(Var, usize),
    Gather(Var, Vec<usize>),
    Stack(Vec<Var>),
    SelectRows(Vec<bool>, Var, Var),
    Slice(Var, usize, usize),
    Reshape(Var),
    Softmax(Var),
    SoftmaxCrossEntropy(Var, usize),
    Im2Col(Var, usize),
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Detach(_) => "detach",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::OneMinus(_) => "one_minus",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gelu(_) => "gelu",
            Op::Tanh(_) => "tanh",
            Op::Concat(..) => "concat",
            Op::AddRow(..) => "add_row",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanRows(_) => "mean_rows",
            Op::Row(..) => "row",
            Op::Gather(..) => "gather",
            Op::Stack(_) => "stack",
            Op::SelectRows(..) => "select_rows",
            Op::Slice(..) => "slice",
            Op::Reshape(_) => "reshape",
            Op::Softmax(_) => "softmax",
            Op::SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
            Op::Im2Col(..) => "im2col",
        }
    }

    /// Parents through which gradient flows. A detached node reports none.
    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Detach(_) => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Concat(a, b)
            | Op::AddRow(a, b)
            | Op::SelectRows(_, a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::OneMinus(a)
            | Op::Sigmoid(a)
            | Op::Gelu(a)
            | Op::Tanh(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::Row(a, _)
            | Op::Gather(a, _)
            | Op::Slice(a, _, _)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::SoftmaxCrossEntropy(a, _)
            | Op::Im2Col(a, _) => vec![*a],
            Op::Stack(vs) => vs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    is_param: bool,
    grad: Option<Tensor>,
}

/// Dynamic computation tape, rebuilt for every training step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t)
        + 0.5 * x * (1.0 - t * t) * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

// out[m,n] += a[m,k] * b[k,n]
fn gemm_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    if n == 1 {
        for (o, arow) in out.iter_mut().zip(a.chunks_exact(k)) {
            *o += dot(arow, b);
        }
        return;
    }
    for (orow, arow) in out.chunks_exact_mut(n).zip(a.chunks_exact(k)).take(m) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            if av != 0.0 {
                axpy(orow, av, brow);
            }
        }
    }
}

// out[m,n] += a[m,k] * b[n,k]^T
fn gemm_bt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    if k == 1 {
        for (orow, &av) in out.chunks_exact_mut(n).zip(a).take(m) {
            axpy(orow, av, b);
        }
        return;
    }
    for (orow, arow) in out.chunks_exact_mut(n).zip(a.chunks_exact(k)).take(m) {
        for (o, brow) in orow.iter_mut().zip(b.chunks_exact(k)) {
            *o += dot(arow, brow);
        }
    }
}

// out[k,n] += a[m,k]^T * b[m,n]
fn gemm_at_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    if n == 1 {
        for (arow, &bv) in a.chunks_exact(k).zip(b).take(m) {
            if bv != 0.0 {
                axpy(out, bv, arow);
            }
        }
        return;
    }
    for (arow, brow) in a.chunks_exact(k).zip(b.chunks_exact(n)).take(m) {
        for (&av, orow) in arow.iter().zip(out.chunks_exact_mut(n)) {
            if av != 0.0 {
                axpy(orow, av, brow);
            }
        }
    }
}

/// Shape classes accepted by `matmul`: (m, k, n, output shape).
fn matmul_dims(a: &Tensor, b: &Tensor) -> Option<(usize, usize, usize, Vec<usize>)> {
    match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => Some((*m, *k, *n, vec![*m, *n])),
        ([m, k], [k2]) if k == k2 => Some((*m, *k, 1, vec![*m])),
        ([k], [k2, n]) if k == k2 => Some((1, *k, *n, vec![*n])),
        _ => None,
    }
}

fn scalar_pair(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() || a.len() == 1 || b.len() == 1
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let shape = if a.len() >= b.len() { a.shape() } else { b.shape() }.to_vec();
    let data = if a.shape() == b.shape() {
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect()
    } else if a.len() == 1 {
        let x = a.data()[0];
        b.data().iter().map(|y| f(x, *y)).collect()
    } else {
        let y = b.data()[0];
        a.data().iter().map(|x| f(*x, y)).collect()
    };
    Tensor::new(shape, data).expect("broadcast shape")
}

/// Reduce a broadcast gradient back onto an operand's shape.
fn unbroadcast(g: Tensor, target: &Tensor) -> Tensor {
    if g.shape() == target.shape() {
        g
    } else {
        Tensor::scalar(g.data().iter().sum())
    }
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| f(*x)).collect())
        .expect("map preserves shape")
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            is_param: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Learnable leaf; receives an accumulated gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            is_param: true,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            is_param: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a parameter leaf, if any has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::Detach(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n, shape) = matmul_dims(av, bv).ok_or_else(|| dim_err("matmul", av, bv))?;
        let mut out = vec![0.0; m * n];
        gemm_acc(&mut out, av.data(), bv.data(), m, k, n);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for matrices `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = match (av.shape(), bv.shape()) {
            ([m, k], [n, k2]) if k == k2 => (*m, *k, *n),
            _ => return Err(dim_err("matmul_t", av, bv)),
        };
        let mut out = vec![0.0; m * n];
        gemm_bt_acc(&mut out, av.data(), bv.data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !scalar_pair(av, bv) {
            return Err(dim_err("add", av, bv));
        }
        let t = zip_broadcast(av, bv, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !scalar_pair(av, bv) {
            return Err(dim_err("sub", av, bv));
        }
        let t = zip_broadcast(av, bv, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !scalar_pair(av, bv) {
            return Err(dim_err("mul", av, bv));
        }
        let t = zip_broadcast(av, bv, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = map(self.value(a), |x| x * c);
        self.push(t, Op::Scale(a, c))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let t = map(self.value(a), |x| 1.0 - x);
        self.push(t, Op::OneMinus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = map(self.value(a), sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = map(self.value(a), gelu);
        self.push(t, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = map(self.value(a), f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    /// Concatenate along the last axis. Matrices must agree on row count.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let t = match (av.shape(), bv.shape()) {
            ([p], [q]) => {
                let mut d = av.data().to_vec();
                d.extend_from_slice(bv.data());
                Tensor::new(vec![p + q], d)?
            }
            ([m, p], [m2, q]) if m == m2 => {
                let mut d = Vec::with_capacity(m * (p + q));
                for i in 0..*m {
                    d.extend_from_slice(av.row(i));
                    d.extend_from_slice(bv.row(i));
                }
                Tensor::new(vec![*m, p + q], d)?
            }
            _ => return Err(dim_err("concat", av, bv)),
        };
        Ok(self.push(t, Op::Concat(a, b)))
    }

    /// Add vector `b: [n]` to every row of `a: [m,n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let n = match (av.shape(), bv.shape()) {
            ([_, n], [n2]) if n == n2 => *n,
            _ => return Err(dim_err("add_row", av, bv)),
        };
        let mut d = av.data().to_vec();
        for row in d.chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(bv.data()) {
                *x += y;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), d)?;
        Ok(self.push(t, Op::AddRow(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Column-wise mean of a matrix: `[m,n] -> [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = match av.shape() {
            [m, n] => (*m, *n),
            _ => return Err(dim_err("mean_rows", av, av)),
        };
        let mut d = vec![0.0; n];
        for i in 0..m {
            for (o, x) in d.iter_mut().zip(av.row(i)) {
                *o += x;
            }
        }
        for o in &mut d {
            *o /= m as f64;
        }
        Ok(self.push(Tensor::vector(d), Op::MeanRows(a)))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let av = self.value(a);
        if av.ndim() != 2 {
            return Err(dim_err("row", av, av));
        }
        if i >= av.rows() {
            return Err(Error::Index {
                index: i,
                len: av.rows(),
            });
        }
        let t = Tensor::vector(av.row(i).to_vec());
        Ok(self.push(t, Op::Row(a, i)))
    }

    /// Gather rows of `a: [m,n]` into `[k,n]`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if av.ndim() != 2 || idx.is_empty() {
            return Err(dim_err("gather", av, av));
        }
        let mut d = Vec::with_capacity(idx.len() * av.cols());
        for &i in idx {
            if i >= av.rows() {
                return Err(Error::Index {
                    index: i,
                    len: av.rows(),
                });
            }
            d.extend_from_slice(av.row(i));
        }
        let t = Tensor::new(vec![idx.len(), av.cols()], d)?;
        Ok(self.push(t, Op::Gather(a, idx.to_vec())))
    }

    /// Stack equal-length vectors as rows.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| Error::contract("stack of zero rows"))?;
        let n = self.value(*first).len();
        let mut d = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            let rv = self.value(r);
            if rv.ndim() != 1 || rv.len() != n {
                return Err(dim_err("stack", self.value(*first), rv));
            }
            d.extend_from_slice(rv.data());
        }
        let t = Tensor::new(vec![rows.len(), n], d)?;
        Ok(self.push(t, Op::Stack(rows.to_vec())))
    }

    /// Row `i` from `a` where `mask[i]`, otherwise from `b`.
    pub fn select_rows(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || av.ndim() != 2 || mask.len() != av.rows() {
            return Err(dim_err("select_rows", av, bv));
        }
        let mut d = Vec::with_capacity(av.len());
        for (i, &m) in mask.iter().enumerate() {
            d.extend_from_slice(if m { av.row(i) } else { bv.row(i) });
        }
        let t = Tensor::new(av.shape().to_vec(), d)?;
        Ok(self.push(t, Op::SelectRows(mask.to_vec(), a, b)))
    }

    /// Slice `[start, end)` along the last axis.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        if start >= end || end > c {
            return Err(Error::Index { index: end, len: c });
        }
        let w = end - start;
        let mut d = Vec::with_capacity(av.rows() * w);
        for i in 0..av.rows() {
            d.extend_from_slice(&av.row(i)[start..end]);
        }
        let shape = if av.ndim() == 2 {
            vec![av.rows(), w]
        } else {
            vec![w]
        };
        let t = Tensor::new(shape, d)?;
        Ok(self.push(t, Op::Slice(a, start, end)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.ndim() != 1 {
            return Err(dim_err("softmax", av, av));
        }
        let t = Tensor::vector(softmax_vec(av.data()));
        Ok(self.push(t, Op::Softmax(a)))
    }

    /// `logsumexp(logits) - logits[target]`, with max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.ndim() != 1 {
            return Err(dim_err("softmax_cross_entropy", lv, lv));
        }
        if target >= lv.len() {
            return Err(Error::Index {
                index: target,
                len: lv.len(),
            });
        }
        let loss = log_sum_exp(lv.data()) - lv.data()[target];
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCrossEntropy(logits, target)))
    }

    /// Zero-padded patches of `a: [c,d]` for a width-`w` 1-D convolution
    /// over the last axis: output `[d, c*w]`, row `i` holding
    /// `a[ch, i + j - w/2]` at column `ch*w + j`.
    pub fn im2col(&mut self, a: Var, width: usize) -> Result<Var> {
        let av = self.value(a);
        if av.ndim() != 2 || width % 2 == 0 {
            return Err(dim_err("im2col", av, av));
        }
        let (c, d) = (av.rows(), av.cols());
        let half = width / 2;
        let mut out = vec![0.0; d * c * width];
        for i in 0..d {
            for ch in 0..c {
                for j in 0..width {
                    let src = i as isize + j as isize - half as isize;
                    if src >= 0 && (src as usize) < d {
                        out[i * c * width + ch * width + j] = av.row(ch)[src as usize];
                    }
                }
            }
        }
        let t = Tensor::new(vec![d, c * width], out)?;
        Ok(self.push(t, Op::Im2Col(a, width)))
    }

    /// Backpropagate from a single-element root, accumulating into the
    /// gradient of every parameter leaf reachable through non-detached edges.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::contract(format!(
                "backward from non-scalar root of shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if self.nodes[idx].is_param {
                match &mut self.nodes[idx].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            if self.scatter_backward(idx, &g, &mut grads) {
                continue;
            }
            let contribs = self.local_backward(idx, &g)?;
            for (v, cg) in contribs {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&cg),
                    slot @ None => *slot = Some(cg),
                }
            }
        }
        Ok(())
    }

    /// Row, gather and slice gradients are added straight into the parent's
    /// accumulator. Returns false for every other op.
    fn scatter_backward(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> bool {
        let (a, shape) = match &self.nodes[idx].op {
            Op::Row(a, _) | Op::Gather(a, _) | Op::Slice(a, _, _) => (*a, self.nodes[a.0].value.shape()),
            _ => return false,
        };
        if !self.nodes[a.0].needs_grad {
            return true;
        }
        let acc = grads[a.0].get_or_insert_with(|| Tensor::zeros(shape));
        match &self.nodes[idx].op {
            Op::Row(_, i) => {
                for (o, x) in acc.row_mut(*i).iter_mut().zip(g.data()) {
                    *o += x;
                }
            }
            Op::Gather(_, rows) => {
                for (k, &i) in rows.iter().enumerate() {
                    for (o, x) in acc.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
            }
            Op::Slice(_, start, end) => {
                let w = end - start;
                for i in 0..acc.rows() {
                    for (o, x) in acc.row_mut(i)[*start..*end].iter_mut().zip(&g.data()[i * w..(i + 1) * w]) {
                        *o += x;
                    }
                }
            }
            _ => unreachable!(),
        }
        true
    }

    fn local_backward(&self, idx: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].needs_grad;
        let out = &node.value;
        let mut res = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf | Op::Detach(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n, _) = matmul_dims(av, bv).expect("checked at forward");
                if need(*a) {
                    // gA[m,k] = G[m,n] · B[k,n]^T
                    let mut d = vec![0.0; m * k];
                    gemm_bt_acc(&mut d, g.data(), bv.data(), m, n, k);
                    res.push((*a, Tensor::new(av.shape().to_vec(), d)?));
                }
                if need(*b) {
                    // gB[k,n] = A[m,k]^T · G[m,n]
                    let mut d = vec![0.0; k * n];
                    gemm_at_acc(&mut d, av.data(), g.data(), m, k, n);
                    res.push((*b, Tensor::new(bv.shape().to_vec(), d)?));
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if need(*a) {
                    // gA[m,k] = G[m,n] · B[n,k]
                    let mut d = vec![0.0; m * k];
                    gemm_acc(&mut d, g.data(), bv.data(), m, n, k);
                    res.push((*a, Tensor::new(av.shape().to_vec(), d)?));
                }
                if need(*b) {
                    // gB[n,k] = G[m,n]^T · A[m,k]
                    let mut d = vec![0.0; n * k];
                    gemm_at_acc(&mut d, g.data(), av.data(), m, n, k);
                    res.push((*b, Tensor::new(bv.shape().to_vec(), d)?));
                }
            }
            Op::Add(a, b) => {
                if need(*a) {
                    res.push((*a, unbroadcast(g.clone(), val(*a))));
                }
                if need(*b) {
                    res.push((*b, unbroadcast(g.clone(), val(*b))));
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    res.push((*a, unbroadcast(g.clone(), val(*a))));
                }
                if need(*b) {
                    res.push((*b, unbroadcast(map(g, |x| -x), val(*b))));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if need(*a) {
                    let ga = zip_broadcast(g, bv, |x, y| x * y);
                    res.push((*a, unbroadcast(ga, av)));
                }
                if need(*b) {
                    let gb = zip_broadcast(g, av, |x, y| x * y);
                    res.push((*b, unbroadcast(gb, bv)));
                }
            }
            Op::Scale(a, c) => res.push((*a, map(g, |x| x * c))),
            Op::OneMinus(a) => res.push((*a, map(g, |x| -x))),
            Op::Sigmoid(a) => {
                let d = g.data().iter().zip(out.data()).map(|(gi, s)| gi * s * (1.0 - s));
                res.push((*a, Tensor::new(g.shape().to_vec(), d.collect())?));
            }
            Op::Gelu(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(gi, x)| gi * gelu_grad(*x));
                res.push((*a, Tensor::new(g.shape().to_vec(), d.collect())?));
            }
            Op::Tanh(a) => {
                let d = g.data().iter().zip(out.data()).map(|(gi, t)| gi * (1.0 - t * t));
                res.push((*a, Tensor::new(g.shape().to_vec(), d.collect())?));
            }
            Op::Concat(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (p, q) = (av.cols(), bv.cols());
                let rows = av.rows();
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(bv.len());
                for i in 0..rows {
                    let gr = &g.data()[i * (p + q)..(i + 1) * (p + q)];
                    da.extend_from_slice(&gr[..p]);
                    db.extend_from_slice(&gr[p..]);
                }
                if need(*a) {
                    res.push((*a, Tensor::new(av.shape().to_vec(), da)?));
                }
                if need(*b) {
                    res.push((*b, Tensor::new(bv.shape().to_vec(), db)?));
                }
            }
            Op::AddRow(a, b) => {
                if need(*a) {
                    res.push((*a, g.clone()));
                }
                if need(*b) {
                    let n = g.cols();
                    let mut d = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (o, x) in d.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    res.push((*b, Tensor::vector(d)));
                }
            }
            Op::Sum(a) => {
                let av = val(*a);
                res.push((*a, Tensor::full(av.shape(), g.item())));
            }
            Op::Mean(a) => {
                let av = val(*a);
                res.push((*a, Tensor::full(av.shape(), g.item() / av.len() as f64)));
            }
            Op::MeanRows(a) => {
                let av = val(*a);
                let m = av.rows();
                let mut d = Vec::with_capacity(av.len());
                for _ in 0..m {
                    d.extend(g.data().iter().map(|x| x / m as f64));
                }
                res.push((*a, Tensor::new(av.shape().to_vec(), d)?));
            }
            Op::Row(a, i) => {
                let mut t = Tensor::zeros(val(*a).shape());
                t.row_mut(*i).copy_from_slice(g.data());
                res.push((*a, t));
            }
            Op::Gather(a, idx) => {
                let mut t = Tensor::zeros(val(*a).shape());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, x) in t.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
                res.push((*a, t));
            }
            Op::Stack(rows) => {
                for (k, r) in rows.iter().enumerate() {
                    if need(*r) {
                        res.push((*r, Tensor::vector(g.row(k).to_vec())));
                    }
                }
            }
            Op::SelectRows(mask, a, b) => {
                let mut ga = Tensor::zeros(g.shape());
                let mut gb = Tensor::zeros(g.shape());
                for (i, &m) in mask.iter().enumerate() {
                    let dst = if m { ga.row_mut(i) } else { gb.row_mut(i) };
                    dst.copy_from_slice(g.row(i));
                }
                if need(*a) {
                    res.push((*a, ga));
                }
                if need(*b) {
                    res.push((*b, gb));
                }
            }
            Op::Slice(a, start, end) => {
                let av = val(*a);
                let mut t = Tensor::zeros(av.shape());
                let w = end - start;
                for i in 0..av.rows() {
                    t.row_mut(i)[*start..*end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                res.push((*a, t));
            }
            Op::Reshape(a) => {
                res.push((*a, g.reshape(val(*a).shape())?));
            }
            Op::Softmax(a) => {
                let s = out.data();
                let dot: f64 = g.data().iter().zip(s).map(|(x, y)| x * y).sum();
                let d = s.iter().zip(g.data()).map(|(si, gi)| si * (gi - dot)).collect();
                res.push((*a, Tensor::vector(d)));
            }
            Op::SoftmaxCrossEntropy(a, target) => {
                let mut p = softmax_vec(val(*a).data());
                p[*target] -= 1.0;
                let gi = g.item();
                for x in &mut p {
                    *x *= gi;
                }
                res.push((*a, Tensor::vector(p)));
            }
            Op::Im2Col(a, width) => {
                let av = val(*a);
                let (c, d) = (av.rows(), av.cols());
                let half = width / 2;
                let mut t = Tensor::zeros(av.shape());
                for i in 0..d {
                    for ch in 0..c {
                        for j in 0..*width {
                            let src = i as isize + j as isize - half as isize;
                            if src >= 0 && (src as usize) < d {
                                t.row_mut(ch)[src as usize] += g.data()[i * c * width + ch * width + j];
                            }
                        }
                    }
                }
                res.push((*a, t));
            }
        }
        Ok(res)
    }
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_vec(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

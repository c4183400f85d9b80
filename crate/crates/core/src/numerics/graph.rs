//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended after their inputs, so the insertion order is a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Element-wise binary operations broadcast an operand whose row or column
//! count is 1 against the other operand.

use nalgebra::DMatrix;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Clamp { a: Var, lo: f64, hi: f64 },
    Sum(Var),
    SumCols(Var),
    SumRows(Var),
    LogSumExpCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    Transpose(Var),
    Inverse(Var),
    LogDet(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// A computation graph built one operation at a time.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Gradients of a scalar output with respect to the parameter nodes.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the output does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, zeros when the output does not depend on it.
    pub fn get_or_zeros(&self, var: Var, shape: [usize; 2]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape[0], shape[1]))
    }
}

fn broadcast_shape(a: [usize; 2], b: [usize; 2]) -> Result<[usize; 2]> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a[0], b[0]), dim(a[1], b[1])) {
        (Some(r), Some(c)) => Ok([r, c]),
        _ => Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}"))),
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let shape = broadcast_shape(a.shape(), b.shape())?;
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(shape[0], shape[1], data);
    }
    let (ad, bd) = (a.data(), b.data());
    let [ar, ac] = a.shape();
    let [br, bc] = b.shape();
    let mut data = Vec::with_capacity(shape[0] * shape[1]);
    for i in 0..shape[0] {
        let ia = if ar == 1 { 0 } else { i };
        let ib = if br == 1 { 0 } else { i };
        for j in 0..shape[1] {
            let x = ad[ia * ac + if ac == 1 { 0 } else { j }];
            let y = bd[ib * bc + if bc == 1 { 0 } else { j }];
            data.push(f(x, y));
        }
    }
    Tensor::new(shape[0], shape[1], data)
}

/// Sum `g` down to `shape`, undoing a broadcast.
fn reduce_to(g: Tensor, shape: [usize; 2]) -> Tensor {
    if g.shape() == shape {
        return g;
    }
    let [gr, gc] = g.shape();
    let mut out = Tensor::zeros(shape[0], shape[1]);
    let od = out.data_mut();
    for i in 0..gr {
        let oi = if shape[0] == 1 { 0 } else { i };
        for j in 0..gc {
            let oj = if shape[1] == 1 { 0 } else { j };
            od[oi * shape[1] + oj] += g.get(i, j);
        }
    }
    out
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    Tensor::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
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

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(Op::Leaf, value, true);
        self.params.push(v);
        v
    }

    /// A non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let value = zip_broadcast(self.value(a), self.value(b), f)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(op, value, ng))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let ng = self.needs(a);
        self.push(op, value, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let mut out = Tensor::zeros(sa[0], sb[1]);
        gemm(1.0, self.value(a), false, self.value(b), false, 0.0, &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul { a, b, transpose_b: false }, out, ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[1] {
            return Err(Error::Shape(format!("matmul_t {sa:?} x {sb:?}ᵀ")));
        }
        let mut out = Tensor::zeros(sa[0], sb[0]);
        gemm(1.0, self.value(a), false, self.value(b), true, 0.0, &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul { a, b, transpose_b: true }, out, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.offset(n, 1.0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("a tensor always broadcasts with itself")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp { a, lo, hi }, |x| x.clamp(lo, hi))
    }

    /// Sum of all entries, as a `1 × 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Op::Sum(a), Tensor::scalar(s), ng)
    }

    /// Row sums: `R × C` to `R × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows()).map(|i| t.row_slice(i).iter().sum()).collect();
        let value = Tensor::new(t.rows(), 1, data).expect("non-empty");
        let ng = self.needs(a);
        self.push(Op::SumCols(a), value, ng)
    }

    /// Column sums: `R × C` to `1 × C`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut data = vec![0.0; t.cols()];
        for i in 0..t.rows() {
            for (d, v) in data.iter_mut().zip(t.row_slice(i)) {
                *d += v;
            }
        }
        let value = Tensor::new(1, t.cols(), data).expect("non-empty");
        let ng = self.needs(a);
        self.push(Op::SumRows(a), value, ng)
    }

    /// Row-wise `log Σ_j exp(a_ij)`: `R × C` to `R × 1`.
    pub fn logsumexp_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows()).map(|i| logsumexp(t.row_slice(i))).collect();
        let value = Tensor::new(t.rows(), 1, data).expect("non-empty");
        let ng = self.needs(a);
        self.push(Op::LogSumExpCols(a), value, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p)[0])
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        if parts.iter().any(|&p| self.shape(p)[0] != rows) {
            return Err(Error::Shape("concat_cols row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        let value = Tensor::new(rows, cols, data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.shape(p)[1])
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        if parts.iter().any(|&p| self.shape(p)[1] != cols) {
            return Err(Error::Shape("concat_rows column counts differ".into()));
        }
        let rows: usize = parts.iter().map(|&p| self.shape(p)[0]).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        let value = Tensor::new(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let [_, c] = self.shape(a);
        if len == 0 || start + len > c {
            return Err(Error::Shape(format!("column slice {start}..{} of {c}", start + len)));
        }
        let value = self.value(a).cols_range(start, len);
        let ng = self.needs(a);
        Ok(self.push(Op::SliceCols { a, start }, value, ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let [r, _] = self.shape(a);
        if len == 0 || start + len > r {
            return Err(Error::Shape(format!("row slice {start}..{} of {r}", start + len)));
        }
        let value = self.value(a).rows_range(start, len);
        let ng = self.needs(a);
        Ok(self.push(Op::SliceRows { a, start }, value, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.needs(a);
        self.push(Op::Transpose(a), value, ng)
    }

    /// Inverse of a small square matrix.
    pub fn inverse(&mut self, a: Var) -> Result<Var> {
        let m = to_dmatrix(self.value(a));
        if !m.is_square() {
            return Err(Error::Shape("inverse of a non-square matrix".into()));
        }
        let inv = m
            .try_inverse()
            .ok_or_else(|| Error::Contract("inverse of a singular matrix".into()))?;
        let ng = self.needs(a);
        Ok(self.push(Op::Inverse(a), from_dmatrix(&inv), ng))
    }

    /// `log |det a|` of a small square matrix.
    pub fn log_det(&mut self, a: Var) -> Result<Var> {
        let m = to_dmatrix(self.value(a));
        if !m.is_square() {
            return Err(Error::Shape("log-determinant of a non-square matrix".into()));
        }
        let det = m.determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(Error::Contract("log-determinant of a singular matrix".into()));
        }
        let ng = self.needs(a);
        Ok(self.push(Op::LogDet(a), Tensor::scalar(det.abs().ln()), ng))
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.shape(output) != [1, 1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));
        let mut keep = vec![false; self.nodes.len()];
        for p in &self.params {
            keep[p.0] = true;
        }

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = (if keep[idx] { grads[idx].clone() } else { grads[idx].take() }) else {
                continue;
            };
            self.propagate(&node.op, &node.value, g, &mut grads);
        }
        for (i, slot) in grads.iter_mut().enumerate() {
            if !keep[i] {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].needs_grad;
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, transpose_b } => {
                if need(a) {
                    let sa = val(a).shape();
                    let mut ga = grads[a.0].take().unwrap_or_else(|| Tensor::zeros(sa[0], sa[1]));
                    // out = a·b  => ga += g·bᵀ ; out = a·bᵀ => ga += g·b
                    gemm(1.0, &g, false, val(b), !transpose_b, 1.0, &mut ga);
                    grads[a.0] = Some(ga);
                }
                if need(b) {
                    let sb = val(b).shape();
                    let mut gb = grads[b.0].take().unwrap_or_else(|| Tensor::zeros(sb[0], sb[1]));
                    if transpose_b {
                        gemm(1.0, &g, true, val(a), false, 1.0, &mut gb);
                    } else {
                        gemm(1.0, val(a), true, &g, false, 1.0, &mut gb);
                    }
                    grads[b.0] = Some(gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if need(b) {
                    let mut gb = reduce_to(g.clone(), val(b).shape());
                    if sign < 0.0 {
                        gb.scale_in_place(-1.0);
                    }
                    accumulate(grads, b.0, gb);
                }
                if need(a) {
                    accumulate(grads, a.0, reduce_to(g, val(a).shape()));
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    let ga = zip_broadcast(&g, val(b), |x, y| x * y).expect("forward shapes");
                    accumulate(grads, a.0, reduce_to(ga, val(a).shape()));
                }
                if need(b) {
                    let gb = zip_broadcast(&g, val(a), |x, y| x * y).expect("forward shapes");
                    accumulate(grads, b.0, reduce_to(gb, val(b).shape()));
                }
            }
            Op::Div(a, b) => {
                if need(a) {
                    let ga = zip_broadcast(&g, val(b), |x, y| x / y).expect("forward shapes");
                    accumulate(grads, a.0, reduce_to(ga, val(a).shape()));
                }
                if need(b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = zip_broadcast(out, val(b), |o, y| -o / y).expect("forward shapes");
                    let gb = zip_broadcast(&g, &q, |x, y| x * y).expect("forward shapes");
                    accumulate(grads, b.0, reduce_to(gb, val(b).shape()));
                }
            }
            Op::Scale(a, k) => {
                let mut ga = g;
                ga.scale_in_place(k);
                accumulate(grads, a.0, ga);
            }
            Op::Offset(a) => accumulate(grads, a.0, g),
            Op::Tanh(a) => {
                let ga = zip_broadcast(&g, out, |x, y| x * (1.0 - y * y)).expect("same shape");
                accumulate(grads, a.0, ga);
            }
            Op::Sigmoid(a) => {
                let ga = zip_broadcast(&g, out, |x, y| x * y * (1.0 - y)).expect("same shape");
                accumulate(grads, a.0, ga);
            }
            Op::Exp(a) => {
                let ga = zip_broadcast(&g, out, |x, y| x * y).expect("same shape");
                accumulate(grads, a.0, ga);
            }
            Op::Log(a) => {
                let ga = zip_broadcast(&g, val(a), |x, y| x / y).expect("same shape");
                accumulate(grads, a.0, ga);
            }
            Op::Relu(a) => {
                let ga = zip_broadcast(&g, val(a), |x, y| if y > 0.0 { x } else { 0.0 })
                    .expect("same shape");
                accumulate(grads, a.0, ga);
            }
            Op::Clamp { a, lo, hi } => {
                let ga = zip_broadcast(&g, val(a), |x, y| if (lo..=hi).contains(&y) { x } else { 0.0 })
                    .expect("same shape");
                accumulate(grads, a.0, ga);
            }
            Op::Sum(a) => {
                let [r, c] = val(a).shape();
                accumulate(grads, a.0, Tensor::filled(r, c, g.item()));
            }
            Op::SumCols(a) => {
                let [r, c] = val(a).shape();
                accumulate(grads, a.0, Tensor::from_fn(r, c, |i, _| g.get(i, 0)));
            }
            Op::SumRows(a) => {
                let [r, c] = val(a).shape();
                accumulate(grads, a.0, Tensor::from_fn(r, c, |_, j| g.get(0, j)));
            }
            Op::LogSumExpCols(a) => {
                let x = val(a);
                let ga = Tensor::from_fn(x.rows(), x.cols(), |i, j| {
                    g.get(i, 0) * (x.get(i, j) - out.get(i, 0)).exp()
                });
                accumulate(grads, a.0, ga);
            }
            Op::ConcatCols(ref parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if need(p) {
                        accumulate(grads, p.0, g.cols_range(start, w));
                    }
                    start += w;
                }
            }
            Op::ConcatRows(ref parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = val(p).rows();
                    if need(p) {
                        accumulate(grads, p.0, g.rows_range(start, h));
                    }
                    start += h;
                }
            }
            Op::SliceCols { a, start } => {
                let [r, c] = val(a).shape();
                let ga = grads[a.0].get_or_insert_with(|| Tensor::zeros(r, c));
                let w = g.cols();
                for i in 0..r {
                    for j in 0..w {
                        let v = ga.get(i, start + j) + g.get(i, j);
                        ga.set(i, start + j, v);
                    }
                }
            }
            Op::SliceRows { a, start } => {
                let [r, c] = val(a).shape();
                let ga = grads[a.0].get_or_insert_with(|| Tensor::zeros(r, c));
                let offset = start * c;
                for (dst, src) in ga.data_mut()[offset..offset + g.len()].iter_mut().zip(g.data()) {
                    *dst += src;
                }
            }
            Op::Transpose(a) => accumulate(grads, a.0, g.transpose()),
            Op::Inverse(a) => {
                // d(X⁻¹) = -X⁻¹ dX X⁻¹  =>  gX = -X⁻ᵀ G X⁻ᵀ
                let yt = out.transpose();
                let mut ga = yt.matmul(&g).expect("square").matmul(&yt).expect("square");
                ga.scale_in_place(-1.0);
                accumulate(grads, a.0, ga);
            }
            Op::LogDet(a) => {
                let inv = to_dmatrix(val(a)).try_inverse().expect("checked in forward");
                let mut ga = from_dmatrix(&inv.transpose());
                ga.scale_in_place(g.item());
                accumulate(grads, a.0, ga);
            }
        }
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

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the second operand of a binary op lines up with the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    ScalarLhs,
    ScalarRhs,
    /// lhs is a row vector repeated over every row of rhs
    RowLhs,
    /// rhs is a row vector repeated over every row of lhs
    RowRhs,
}

/// A tensor viewed as `[outer, len, inner]` around a reduction axis.
#[derive(Clone, Copy, Debug)]
struct AxisSplit {
    outer: usize,
    len: usize,
    inner: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    MatMul(Var, Var),
    Transpose(Var),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    Slice { src: Var, start: usize, len: usize },
    GatherRows { src: Var, index: Vec<usize> },
    Reshape(Var),
    Sum(Var, AxisSplit),
    Mean(Var, AxisSplit),
    SumAll(Var),
    MeanAll(Var),
    Max { src: Var, argmax: Vec<usize> },
    LogSumExp(Var, AxisSplit),
    MaskedLogSumExp { src: Var, mask: Vec<bool> },
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Powf(Var, f64),
    Scale(Var, f64),
    AddScalar(Var),
    RowDot(Var, Var),
    /// `acts` caches, per row, the activated gates `i, f, u, o` and `tanh(c')`.
    LstmGates { gates: Var, cell: Var, acts: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Execution-ordered record of tensor operations.
///
/// Nodes are appended as ops run, so the node order is a topological order;
/// [`Graph::backward`] walks it in reverse. A fresh graph is built for every
/// training step.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    nan_guard: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// The gradient for `v`, or zeros of length `len` when `v` did not
    /// influence the loss.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn is_row_vector(shape: &[usize]) -> Option<usize> {
    match shape {
        [n] => Some(*n),
        [1, n] => Some(*n),
        _ => None,
    }
}

fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(AxisSplit, Vec<usize>)> {
    if axis >= shape.len() {
        return Err(Error::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: vec![axis],
        });
    }
    let split = AxisSplit {
        outer: shape[..axis].iter().product(),
        len: shape[axis],
        inner: shape[axis + 1..].iter().product(),
    };
    let mut out = shape.to_vec();
    out.remove(axis);
    Ok((split, out))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that rejects any op producing NaN or ±∞.
    pub fn with_nan_guard() -> Self {
        Graph {
            nodes: Vec::new(),
            nan_guard: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        if self.nan_guard && !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = match &op {
            Op::Leaf => value.requires_grad(),
            other => parents(other).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// A constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn values(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Bcast, Vec<usize>)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        if sa == sb {
            return Ok((Bcast::Same, sa.to_vec()));
        }
        if nb == 1 {
            return Ok((Bcast::ScalarRhs, sa.to_vec()));
        }
        if na == 1 {
            return Ok((Bcast::ScalarLhs, sb.to_vec()));
        }
        if sa.len() >= 2 {
            if let Some(n) = is_row_vector(sb) {
                if sa.last() == Some(&n) {
                    return Ok((Bcast::RowRhs, sa.to_vec()));
                }
            }
        }
        if sb.len() >= 2 {
            if let Some(n) = is_row_vector(sa) {
                if sb.last() == Some(&n) {
                    return Ok((Bcast::RowLhs, sb.to_vec()));
                }
            }
        }
        Err(shape_err(op, sa, sb))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        make: fn(Var, Var, Bcast) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (bc, shape) = self.bcast(name, a, b)?;
        let va = self.values(a);
        let vb = self.values(b);
        let numel: usize = shape.iter().product();
        let cols = shape.last().copied().unwrap_or(1).max(1);
        let out: Vec<f64> = match bc {
            Bcast::Same => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::ScalarRhs => va.iter().map(|&x| f(x, vb[0])).collect(),
            Bcast::ScalarLhs => vb.iter().map(|&y| f(va[0], y)).collect(),
            Bcast::RowRhs => (0..numel).map(|i| f(va[i], vb[i % cols])).collect(),
            Bcast::RowLhs => (0..numel).map(|i| f(va[i % cols], vb[i])).collect(),
        };
        let value = Tensor::new(shape, out)?;
        self.push(make(a, b, bc), value, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.values(b).iter().any(|&y| y == 0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary("div", a, b, Op::Div, |x, y| x / y)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// `[m,k] · [k,n] → [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(shape_err("matmul", sa, sb)),
        };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.values(a), false, self.values(b), false, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMul(a, b), value, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = match self.shape(a) {
            [m, n] => (*m, *n),
            other => return Err(shape_err("transpose", other, &[])),
        };
        let va = self.values(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = va[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        self.push(Op::Transpose(a), value, "transpose")
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let lead = self.shape(first);
        let lead = lead[..lead.len().saturating_sub(1)].to_vec();
        let rows = self.value(first).rows();
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(shape_err("concat", self.shape(first), s));
            }
            width += self.value(p).cols();
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                let c = self.value(p).cols();
                out.extend_from_slice(&self.values(p)[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(width);
        let value = Tensor::new(shape, out)?;
        self.push(Op::Concat(parts.to_vec()), value, "concat")
    }

    /// Stacks `[r_i, n]` matrices into `[Σr_i, n]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows of zero tensors"))?;
        let cols = match self.shape(first) {
            [_, n] => *n,
            other => return Err(shape_err("concat_rows", other, &[])),
        };
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            match self.shape(p) {
                [r, n] if *n == cols => rows += r,
                other => return Err(shape_err("concat_rows", self.shape(first), other)),
            }
            out.extend_from_slice(self.values(p));
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        self.push(Op::ConcatRows(parts.to_vec()), value, "concat_rows")
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(src).to_vec();
        let cols = match shape.last() {
            Some(&c) if start + len <= c => c,
            _ => return Err(shape_err("slice", &shape, &[start, len])),
        };
        let rows = self.value(src).rows();
        let v = self.values(src);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + start + len]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let value = Tensor::new(out_shape, out)?;
        self.push(Op::Slice { src, start, len }, value, "slice")
    }

    /// Rows of a `[m, n]` matrix picked by `index` (repeats allowed).
    pub fn gather_rows(&mut self, src: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = match self.shape(src) {
            [m, n] => (*m, *n),
            other => return Err(shape_err("gather_rows", other, &[])),
        };
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(shape_err("gather_rows", &[m, n], &[bad]));
        }
        let v = self.values(src);
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index {
            out.extend_from_slice(&v[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(vec![index.len(), n], out)?;
        self.push(
            Op::GatherRows {
                src,
                index: index.to_vec(),
            },
            value,
            "gather_rows",
        )
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(src).clone().with_requires_grad(false).reshape(shape)?;
        self.push(Op::Reshape(src), value, "reshape")
    }

    fn reduce(
        &mut self,
        name: &'static str,
        src: Var,
        axis: usize,
        f: impl Fn(&[f64]) -> f64,
    ) -> Result<(AxisSplit, Tensor)> {
        let (sp, out_shape) = split_axis(name, self.shape(src), axis)?;
        let v = self.values(src);
        let mut out = vec![0.0; sp.outer * sp.inner];
        let mut lane = vec![0.0; sp.len];
        for o in 0..sp.outer {
            for i in 0..sp.inner {
                for (a, slot) in lane.iter_mut().enumerate() {
                    *slot = v[(o * sp.len + a) * sp.inner + i];
                }
                out[o * sp.inner + i] = f(&lane);
            }
        }
        Ok((sp, Tensor::new(out_shape, out)?))
    }

    pub fn sum(&mut self, src: Var, axis: usize) -> Result<Var> {
        let (sp, value) = self.reduce("sum", src, axis, |l| l.iter().sum())?;
        self.push(Op::Sum(src, sp), value, "sum")
    }

    pub fn mean(&mut self, src: Var, axis: usize) -> Result<Var> {
        let (sp, value) = self.reduce("mean", src, axis, |l| {
            l.iter().sum::<f64>() / l.len() as f64
        })?;
        if sp.len == 0 {
            return Err(Error::invalid("mean over an empty axis"));
        }
        self.push(Op::Mean(src, sp), value, "mean")
    }

    pub fn sum_all(&mut self, src: Var) -> Result<Var> {
        let s = self.values(src).iter().sum();
        self.push(Op::SumAll(src), Tensor::scalar(s), "sum_all")
    }

    pub fn mean_all(&mut self, src: Var) -> Result<Var> {
        let v = self.values(src);
        if v.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(Op::MeanAll(src), Tensor::scalar(m), "mean_all")
    }

    /// Maximum over `axis`; ties resolve to the lowest index, which alone
    /// receives the gradient.
    pub fn max(&mut self, src: Var, axis: usize) -> Result<Var> {
        let (sp, out_shape) = split_axis("max", self.shape(src), axis)?;
        if sp.len == 0 {
            return Err(Error::invalid("max over an empty axis"));
        }
        let v = self.values(src);
        let mut out = vec![0.0; sp.outer * sp.inner];
        let mut argmax = vec![0; sp.outer * sp.inner];
        for o in 0..sp.outer {
            for i in 0..sp.inner {
                let mut best = o * sp.len * sp.inner + i;
                for a in 1..sp.len {
                    let idx = (o * sp.len + a) * sp.inner + i;
                    if v[idx] > v[best] {
                        best = idx;
                    }
                }
                out[o * sp.inner + i] = v[best];
                argmax[o * sp.inner + i] = best;
            }
        }
        let value = Tensor::new(out_shape, out)?;
        self.push(Op::Max { src, argmax }, value, "max")
    }

    /// `-max(-x)`; the minimum with the same tie and gradient rule.
    pub fn min(&mut self, src: Var, axis: usize) -> Result<Var> {
        let neg = self.scale(src, -1.0)?;
        let m = self.max(neg, axis)?;
        self.scale(m, -1.0)
    }

    /// `max(x) + ln Σ exp(x − max(x))` over `axis`.
    pub fn logsumexp(&mut self, src: Var, axis: usize) -> Result<Var> {
        let (sp, value) = self.reduce("logsumexp", src, axis, stable_lse)?;
        if sp.len == 0 {
            return Err(Error::invalid("logsumexp over an empty axis"));
        }
        self.push(Op::LogSumExp(src, sp), value, "logsumexp")
    }

    /// Row-wise log-sum-exp of a `[m, n]` matrix restricted to entries where
    /// `mask` (row-major, `m·n`) is true. Rows with no selected entry yield 0
    /// and pass no gradient; callers are expected to drop them.
    pub fn masked_logsumexp(&mut self, src: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = match self.shape(src) {
            [m, n] => (*m, *n),
            other => return Err(shape_err("masked_logsumexp", other, &[])),
        };
        if mask.len() != m * n {
            return Err(shape_err("masked_logsumexp", &[m, n], &[mask.len()]));
        }
        let v = self.values(src);
        let mut out = vec![0.0; m];
        let mut lane = Vec::with_capacity(n);
        for (r, slot) in out.iter_mut().enumerate() {
            lane.clear();
            lane.extend((0..n).filter(|&c| mask[r * n + c]).map(|c| v[r * n + c]));
            if !lane.is_empty() {
                *slot = stable_lse(&lane);
            }
        }
        let value = Tensor::new(vec![m], out)?;
        self.push(
            Op::MaskedLogSumExp {
                src,
                mask: mask.to_vec(),
            },
            value,
            "masked_logsumexp",
        )
    }

    fn unary(&mut self, name: &'static str, src: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(src);
        let out: Vec<f64> = t.values().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(op, value, name)
    }

    pub fn exp(&mut self, src: Var) -> Result<Var> {
        self.unary("exp", src, Op::Exp(src), f64::exp)
    }

    pub fn log(&mut self, src: Var) -> Result<Var> {
        if let Some(bad) = self.values(src).iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive argument {bad}"),
            });
        }
        self.unary("log", src, Op::Log(src), f64::ln)
    }

    pub fn tanh(&mut self, src: Var) -> Result<Var> {
        self.unary("tanh", src, Op::Tanh(src), f64::tanh)
    }

    pub fn sigmoid(&mut self, src: Var) -> Result<Var> {
        self.unary("sigmoid", src, Op::Sigmoid(src), sigmoid)
    }

    /// Elementwise `x^p`; non-integer powers need positive arguments.
    pub fn powf(&mut self, src: Var, p: f64) -> Result<Var> {
        if p.fract() != 0.0 {
            if let Some(bad) = self.values(src).iter().find(|&&x| x <= 0.0) {
                return Err(Error::Domain {
                    op: "powf",
                    detail: format!("non-positive base {bad} for power {p}"),
                });
            }
        }
        self.unary("powf", src, Op::Powf(src, p), |x| x.powf(p))
    }

    pub fn scale(&mut self, src: Var, c: f64) -> Result<Var> {
        self.unary("scale", src, Op::Scale(src, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, src: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", src, Op::AddScalar(src), |x| x + c)
    }

    /// Row-wise dot products of two `[m, d]` matrices → `[m]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, d) = match (sa, sb) {
            ([m, d], [m2, d2]) if m == m2 && d == d2 => (*m, *d),
            _ => return Err(shape_err("row_dot", sa, sb)),
        };
        let (va, vb) = (self.values(a), self.values(b));
        let out = (0..m)
            .map(|r| {
                va[r * d..(r + 1) * d]
                    .iter()
                    .zip(&vb[r * d..(r + 1) * d])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let value = Tensor::new(vec![m], out)?;
        self.push(Op::RowDot(a, b), value, "row_dot")
    }

    /// LSTM state update from pre-activation gates `[N, 4d]` (blocks input,
    /// forget, candidate, output) and the previous cell `[N, d]`. Returns
    /// `[N, 2d]`: the new hidden state, then the new cell state.
    pub fn lstm_gates(&mut self, gates: Var, cell: Var) -> Result<Var> {
        let (sg, sc) = (self.shape(gates), self.shape(cell));
        let (n, d) = match (sg, sc) {
            ([n, d4], [n2, d]) if n == n2 && *d4 == 4 * d => (*n, *d),
            _ => return Err(shape_err("lstm_gates", sg, sc)),
        };
        let (a, c) = (self.values(gates), self.values(cell));
        let mut out = vec![0.0; n * 2 * d];
        let mut acts = vec![0.0; n * 5 * d];
        for r in 0..n {
            let a = &a[r * 4 * d..(r + 1) * 4 * d];
            let c = &c[r * d..(r + 1) * d];
            let (h_out, c_out) = out[r * 2 * d..(r + 1) * 2 * d].split_at_mut(d);
            let act = &mut acts[r * 5 * d..(r + 1) * 5 * d];
            for j in 0..d {
                let i = sigmoid(a[j]);
                let f = sigmoid(a[d + j]);
                let u = a[2 * d + j].tanh();
                let o = sigmoid(a[3 * d + j]);
                let c_next = f * c[j] + i * u;
                let t = c_next.tanh();
                c_out[j] = c_next;
                h_out[j] = o * t;
                act[j] = i;
                act[d + j] = f;
                act[2 * d + j] = u;
                act[3 * d + j] = o;
                act[4 * d + j] = t;
            }
        }
        let value = Tensor::new(vec![n, 2 * d], out)?;
        self.push(Op::LstmGates { gates, cell, acts }, value, "lstm_gates")
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.values();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) => {
                self.acc_bcast(grads, *a, *b, *bc, g, |gi, _| (gi, gi));
            }
            Op::Sub(a, b, bc) => {
                self.acc_bcast(grads, *a, *b, *bc, g, |gi, _| (gi, -gi));
            }
            Op::Mul(a, b, bc) => {
                self.acc_bcast(grads, *a, *b, *bc, g, |gi, (x, y)| (gi * y, gi * x));
            }
            Op::Div(a, b, bc) => {
                self.acc_bcast(grads, *a, *b, *bc, g, |gi, (x, y)| (gi / y, -gi * x / (y * y)));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let ga = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, self.values(*b), true, ga, true);
                }
                if self.requires_grad(*b) {
                    let gb = slot(grads, *b, k * n);
                    gemm(k, m, n, self.values(*a), true, g, false, gb, true);
                }
            }
            Op::Transpose(a) => {
                if self.requires_grad(*a) {
                    let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let ga = slot(grads, *a, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let width = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.requires_grad(p) {
                        let gp = slot(grads, p, rows * c);
                        for r in 0..rows {
                            for j in 0..c {
                                gp[r * c + j] += g[r * width + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.requires_grad(p) {
                        let gp = slot(grads, p, len);
                        for (x, gi) in gp.iter_mut().zip(&g[offset..offset + len]) {
                            *x += gi;
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { src, start, len } => {
                if self.requires_grad(*src) {
                    let t = self.value(*src);
                    let (rows, cols) = (t.rows(), t.cols());
                    let gs = slot(grads, *src, t.numel());
                    for r in 0..rows {
                        for j in 0..*len {
                            gs[r * cols + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Op::GatherRows { src, index } => {
                if self.requires_grad(*src) {
                    let t = self.value(*src);
                    let n = t.cols();
                    let gs = slot(grads, *src, t.numel());
                    for (r, &i) in index.iter().enumerate() {
                        for j in 0..n {
                            gs[i * n + j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::Reshape(src) => {
                if self.requires_grad(*src) {
                    add_into(slot(grads, *src, g.len()), g);
                }
            }
            Op::Sum(src, sp) | Op::Mean(src, sp) => {
                if self.requires_grad(*src) {
                    let scale = if matches!(node.op, Op::Mean(..)) {
                        1.0 / sp.len as f64
                    } else {
                        1.0
                    };
                    let gs = slot(grads, *src, sp.outer * sp.len * sp.inner);
                    for o in 0..sp.outer {
                        for a in 0..sp.len {
                            for i in 0..sp.inner {
                                gs[(o * sp.len + a) * sp.inner + i] += g[o * sp.inner + i] * scale;
                            }
                        }
                    }
                }
            }
            Op::SumAll(src) | Op::MeanAll(src) => {
                if self.requires_grad(*src) {
                    let n = self.value(*src).numel();
                    let gi = if matches!(node.op, Op::MeanAll(_)) {
                        g[0] / n as f64
                    } else {
                        g[0]
                    };
                    for x in slot(grads, *src, n).iter_mut() {
                        *x += gi;
                    }
                }
            }
            Op::Max { src, argmax } => {
                if self.requires_grad(*src) {
                    let gs = slot(grads, *src, self.value(*src).numel());
                    for (&idx, gi) in argmax.iter().zip(g) {
                        gs[idx] += gi;
                    }
                }
            }
            Op::LogSumExp(src, sp) => {
                if self.requires_grad(*src) {
                    let x = self.values(*src);
                    let gs = slot(grads, *src, x.len());
                    for o in 0..sp.outer {
                        for a in 0..sp.len {
                            for i in 0..sp.inner {
                                let idx = (o * sp.len + a) * sp.inner + i;
                                let oi = o * sp.inner + i;
                                gs[idx] += g[oi] * (x[idx] - out[oi]).exp();
                            }
                        }
                    }
                }
            }
            Op::MaskedLogSumExp { src, mask } => {
                if self.requires_grad(*src) {
                    let x = self.values(*src);
                    let n = self.value(*src).cols();
                    let gs = slot(grads, *src, x.len());
                    for (r, (&gr, &lse)) in g.iter().zip(out).enumerate() {
                        for c in 0..n {
                            let idx = r * n + c;
                            if mask[idx] {
                                gs[idx] += gr * (x[idx] - lse).exp();
                            }
                        }
                    }
                }
            }
            Op::Exp(src) => self.acc_unary(grads, *src, g, |_, y, gi| gi * y, out),
            Op::Log(src) => self.acc_unary(grads, *src, g, |x, _, gi| gi / x, out),
            Op::Tanh(src) => self.acc_unary(grads, *src, g, |_, y, gi| gi * (1.0 - y * y), out),
            Op::Sigmoid(src) => self.acc_unary(grads, *src, g, |_, y, gi| gi * y * (1.0 - y), out),
            Op::Powf(src, p) => {
                let p = *p;
                self.acc_unary(grads, *src, g, move |x, _, gi| gi * p * x.powf(p - 1.0), out)
            }
            Op::Scale(src, c) => {
                let c = *c;
                self.acc_unary(grads, *src, g, move |_, _, gi| gi * c, out)
            }
            Op::AddScalar(src) => self.acc_unary(grads, *src, g, |_, _, gi| gi, out),
            Op::RowDot(a, b) => {
                let d = self.value(*a).cols();
                let (va, vb) = (self.values(*a), self.values(*b));
                if self.requires_grad(*a) {
                    let ga = slot(grads, *a, va.len());
                    for (r, gi) in g.iter().enumerate() {
                        for j in 0..d {
                            ga[r * d + j] += gi * vb[r * d + j];
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let gb = slot(grads, *b, vb.len());
                    for (r, gi) in g.iter().enumerate() {
                        for j in 0..d {
                            gb[r * d + j] += gi * va[r * d + j];
                        }
                    }
                }
            }
            Op::LstmGates { gates, cell, acts } => self.backprop_lstm_gates(*gates, *cell, acts, g, grads),
        }
    }

    fn backprop_lstm_gates(&self, gates: Var, cell: Var, acts: &[f64], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let d = self.value(cell).cols();
        let n = self.value(cell).rows();
        let c = self.values(cell);
        let (rg, rc) = (self.requires_grad(gates), self.requires_grad(cell));
        let mut ga = if rg { grads[gates.0].take().unwrap_or_else(|| vec![0.0; n * 4 * d]) } else { Vec::new() };
        let mut gc = if rc { grads[cell.0].take().unwrap_or_else(|| vec![0.0; n * d]) } else { Vec::new() };
        for r in 0..n {
            for j in 0..d {
                let ar = r * 4 * d;
                let act = &acts[r * 5 * d..];
                let (i, f, u, o, t) = (act[j], act[d + j], act[2 * d + j], act[3 * d + j], act[4 * d + j]);
                let gh = g[r * 2 * d + j];
                let dc = g[r * 2 * d + d + j] + gh * o * (1.0 - t * t);
                if rg {
                    ga[ar + j] += dc * u * i * (1.0 - i);
                    ga[ar + d + j] += dc * c[r * d + j] * f * (1.0 - f);
                    ga[ar + 2 * d + j] += dc * i * (1.0 - u * u);
                    ga[ar + 3 * d + j] += gh * t * o * (1.0 - o);
                }
                if rc {
                    gc[r * d + j] += dc * f;
                }
            }
        }
        if rg {
            grads[gates.0] = Some(ga);
        }
        if rc {
            grads[cell.0] = Some(gc);
        }
    }

    fn acc_unary(
        &self,
        grads: &mut [Option<Vec<f64>>],
        src: Var,
        g: &[f64],
        f: impl Fn(f64, f64, f64) -> f64,
        out: &[f64],
    ) {
        if !self.requires_grad(src) {
            return;
        }
        let x = self.values(src);
        let gs = slot(grads, src, x.len());
        for i in 0..x.len() {
            gs[i] += f(x[i], out[i], g[i]);
        }
    }

    /// Accumulates `(∂/∂a, ∂/∂b)` per output element, summing over broadcast axes.
    fn acc_bcast(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        b: Var,
        bc: Bcast,
        g: &[f64],
        f: impl Fn(f64, (f64, f64)) -> (f64, f64),
    ) {
        let (va, vb) = (self.values(a), self.values(b));
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        if bc == Bcast::Same && a != b {
            if ra {
                let ga = slot(grads, a, va.len());
                for i in 0..g.len() {
                    ga[i] += f(g[i], (va[i], vb[i])).0;
                }
            }
            if rb {
                let gb = slot(grads, b, vb.len());
                for i in 0..g.len() {
                    gb[i] += f(g[i], (va[i], vb[i])).1;
                }
            }
            return;
        }
        let mut ga = vec![0.0; va.len()];
        let mut gb = vec![0.0; vb.len()];
        let n = g.len();
        for i in 0..n {
            let (ia, ib) = match bc {
                Bcast::Same => (i, i),
                Bcast::ScalarRhs => (i, 0),
                Bcast::ScalarLhs => (0, i),
                Bcast::RowRhs => (i, i % vb.len()),
                Bcast::RowLhs => (i % va.len(), i),
            };
            let (da, db) = f(g[i], (va[ia], vb[ib]));
            ga[ia] += da;
            gb[ib] += db;
        }
        if ra {
            add_into(slot(grads, a, va.len()), &ga);
        }
        if rb {
            add_into(slot(grads, b, vb.len()), &gb);
        }
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b, _)
        | Op::Sub(a, b, _)
        | Op::Mul(a, b, _)
        | Op::Div(a, b, _)
        | Op::MatMul(a, b)
        | Op::RowDot(a, b) => vec![*a, *b],
        Op::LstmGates { gates, cell, .. } => vec![*gates, *cell],
        Op::Concat(p) | Op::ConcatRows(p) => p.clone(),
        Op::Transpose(s)
        | Op::Reshape(s)
        | Op::Sum(s, _)
        | Op::Mean(s, _)
        | Op::SumAll(s)
        | Op::MeanAll(s)
        | Op::LogSumExp(s, _)
        | Op::Exp(s)
        | Op::Log(s)
        | Op::Tanh(s)
        | Op::Sigmoid(s)
        | Op::Powf(s, _)
        | Op::Scale(s, _)
        | Op::AddScalar(s) => vec![*s],
        Op::Slice { src, .. }
        | Op::GatherRows { src, .. }
        | Op::Max { src, .. }
        | Op::MaskedLogSumExp { src, .. } => vec![*src],
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `max + ln Σ exp(x − max)`; the reference form the graph op uses.
pub fn stable_lse(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

//! Tape-based reverse-mode differentiation with straight-through estimators.
//!
//! Trainable tensors live in a [`ParamStore`] as [`Variable`]s. A [`Tape`]
//! is built fresh for each forward pass: parameters enter it through
//! [`Tape::param`], every primitive records its inputs, and
//! [`Tape::backward`] walks the record in reverse, accumulating
//! `dLoss/dParam` into the store.
//!
//! `round` and `clip` are non-differentiable; the tape uses the usual
//! surrogates (identity for round, an in-range mask for clip).

use crate::error::{arg_err, QueptError, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a trainable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A tensor with an attached gradient buffer of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Variable<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub requires_grad: bool,
}

impl<T: Scalar> Variable<T> {
    pub fn new(value: Tensor<T>, requires_grad: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            requires_grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Named collection of [`Variable`]s. Counts value writes so callers can
/// prove a code path left parameters untouched.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    vars: Vec<Variable<T>>,
    names: Vec<String>,
    writes: u64,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            vars: Vec::new(),
            names: Vec::new(),
            writes: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, requires_grad: bool) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return arg_err(format!("duplicate parameter name `{name}`"));
        }
        self.vars.push(Variable::new(value, requires_grad));
        self.names.push(name);
        Ok(ParamId(self.vars.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn var(&self, id: ParamId) -> &Variable<T> {
        &self.vars[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.vars[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.vars[id.0].grad
    }

    /// Mutable access to a value; every call bumps the write counter.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        self.writes += 1;
        &mut self.vars[id.0].value
    }

    pub fn set_requires_grad(&mut self, id: ParamId, on: bool) {
        self.vars[id.0].requires_grad = on;
    }

    pub fn zero_grad(&mut self) {
        self.vars.iter_mut().for_each(Variable::zero_grad);
    }

    pub fn write_count(&self) -> u64 {
        self.writes
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Variable<T>)> {
        self.vars
            .iter()
            .enumerate()
            .map(|(i, v)| (ParamId(i), self.names[i].as_str(), v))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf(Option<ParamId>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    AddScalar(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Round(Var),
    Clip(Var, T, T),
    Extremum(Var, usize),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    AddRowBias(Var, Var),
    LayerNorm(Var, Vec<T>),
    Softmax(Var),
    Gelu(Var),
    FakeQuantAct(Var, T, T, T),
    Mae(Var, Var),
    Mse(Var, Var),
    Sum(Var),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of primitive operations for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    identity_round: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            identity_round: false,
        }
    }

    /// A tape whose `round` forward is the identity. Used for finite-difference
    /// checks of the straight-through surrogate.
    pub fn with_identity_round() -> Self {
        Self {
            nodes: Vec::new(),
            identity_round: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_raw(value, op, needs_grad)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf(None), false)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Records the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let var = store.var(id);
        self.push_raw(var.value.clone(), Op::Leaf(Some(id)), var.requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    fn scalar_of(&self, s: Var, op: &'static str) -> Result<T> {
        let t = self.value(s);
        if t.numel() != 1 {
            return Err(QueptError::Dimension {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![1],
            });
        }
        Ok(t.item())
    }

    /// `x * s` for a one-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of(s, "mul_scalar")?;
        let v = self.value(x).map(|a| a * sv);
        Ok(self.push(v, Op::MulScalar(x, s), &[x, s]))
    }

    /// `x / s` for a one-element `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of(s, "div_scalar")?;
        if sv == T::zero() {
            return arg_err("division by zero scalar");
        }
        let v = self.value(x).map(|a| a / sv);
        Ok(self.push(v, Op::DivScalar(x, s), &[x, s]))
    }

    /// `x + s` for a one-element `s`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of(s, "add_scalar")?;
        let v = self.value(x).map(|a| a + sv);
        Ok(self.push(v, Op::AddScalar(x, s), &[x, s]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b), &[a, b]))
    }

    /// Round half to even; the gradient passes straight through.
    pub fn round_ste(&mut self, x: Var) -> Var {
        let v = if self.identity_round {
            self.value(x).clone()
        } else {
            self.value(x).map(T::round_half_even)
        };
        self.push(v, Op::Round(x), &[x])
    }

    /// Clamp to `[lo, hi]`; gradient 1 inside the closed interval, 0 outside.
    pub fn clip_ste(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return arg_err(format!("clip bounds reversed: {lo} > {hi}"));
        }
        let v = self.value(x).map(|a| a.max(lo).min(hi));
        Ok(self.push(v, Op::Clip(x, lo, hi), &[x]))
    }

    pub fn max_all(&mut self, x: Var) -> Var {
        let (i, m) = self.value(x).argmax();
        self.push(Tensor::scalar(m), Op::Extremum(x, i), &[x])
    }

    pub fn min_all(&mut self, x: Var) -> Var {
        let (i, m) = self.value(x).argmin();
        self.push(Tensor::scalar(m), Op::Extremum(x, i), &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x).slice_rows(start, end)?;
        Ok(self.push(v, Op::SliceRows(x, start), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x).slice_cols(start, end)?;
        Ok(self.push(v, Op::SliceCols(x, start), &[x]))
    }

    /// Stacks 2-D parts along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return arg_err("concat of zero tensors");
        };
        let cols = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.cols() != cols {
                return Err(QueptError::Dimension {
                    op: "concat_rows",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Joins 2-D parts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return arg_err("concat of zero tensors");
        };
        let rows = self.value(first).rows();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.rows() != rows {
                return Err(QueptError::Dimension {
                    op: "concat_cols",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let width: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let v = Tensor::new(vec![rows, width], data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// `x [m×n] + bias [n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xt, bt) = (self.value(x), self.value(bias));
        let n = xt.cols();
        if bt.numel() != n {
            return Err(QueptError::Dimension {
                op: "add_row_bias",
                lhs: xt.shape().to_vec(),
                rhs: bt.shape().to_vec(),
            });
        }
        let mut v = xt.clone();
        for row in v.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bt.data()) {
                *o += b;
            }
        }
        Ok(self.push(v, Op::AddRowBias(x, bias), &[x, bias]))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let xt = self.value(x);
        let n = xt.cols();
        let nf = T::lit(n as f64);
        let mut v = xt.clone();
        let mut rstds = Vec::with_capacity(xt.rows());
        for row in v.data_mut().chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / nf;
            let rstd = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|a| *a = (*a - mean) * rstd);
            rstds.push(rstd);
        }
        self.push(v, Op::LayerNorm(x, rstds), &[x])
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let n = xt.cols();
        let mut v = xt.clone();
        for row in v.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            row.iter_mut().for_each(|a| *a = (*a - m).exp());
            let s = row.iter().copied().sum::<T>();
            row.iter_mut().for_each(|a| *a /= s);
        }
        self.push(v, Op::Softmax(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5));
        let v = self
            .value(x)
            .map(|a| half * a * (T::one() + (c * (a + k * a * a * a)).tanh()));
        self.push(v, Op::Gelu(x), &[x])
    }

    /// Symmetric fake quantization with a constant scale:
    /// `s · clip(round(x / s), lo, hi)`. Gradient 1 where the rounded code is
    /// within range.
    pub fn fake_quant_act(&mut self, x: Var, s: T, lo: T, hi: T) -> Result<Var> {
        if !(s > T::zero()) {
            return arg_err(format!("activation scale must be positive, got {s}"));
        }
        let ident = self.identity_round;
        let v = self.value(x).map(|a| {
            let q = a / s;
            let q = if ident { q } else { q.round_half_even() };
            s * q.max(lo).min(hi)
        });
        Ok(self.push(v, Op::FakeQuantAct(x, s, lo, hi), &[x]))
    }

    /// Mean absolute error; subgradient 0 at equality.
    pub fn mae(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = crate::tensor::mae(self.value(a), self.value(b))?;
        Ok(self.push(Tensor::scalar(v), Op::Mae(a, b), &[a, b]))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = crate::tensor::mse(self.value(a), self.value(b))?;
        Ok(self.push(Tensor::scalar(v), Op::Mse(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        self.push(Tensor::scalar(v), Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Accumulates `dLoss/dParam` into every reachable parameter's `grad`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return arg_err(format!("backward needs a scalar loss, got shape {:?}", lt.shape()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads, store);
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>], store: &mut ParamStore<T>) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            let target = &self.nodes[v.0];
            if !target.needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); target.value.numel()]);
            f(buf);
        };
        let sum_g = || g.iter().copied().sum::<T>();

        match &node.op {
            Op::Leaf(Some(id)) => {
                let var = &mut store.vars[id.0];
                if var.requires_grad {
                    for (o, &x) in var.grad.data_mut().iter_mut().zip(g) {
                        *o += x;
                    }
                }
            }
            Op::Leaf(None) => {}
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, &x)| *o -= x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                });
            }
            Op::Neg(a) => acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, &x)| *o -= x)),
            Op::Scale(a, c) => acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, &x)| *o += x * *c)),
            Op::MulScalar(x, s) => {
                let sv = self.value(*s).item();
                let xv = self.value(*x).data();
                acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, &d)| *o += d * sv));
                acc(*s, &mut |buf| buf[0] += g.iter().zip(xv).map(|(&d, &a)| d * a).sum::<T>());
            }
            Op::DivScalar(x, s) => {
                let sv = self.value(*s).item();
                let xv = self.value(*x).data();
                acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, &d)| *o += d / sv));
                acc(*s, &mut |buf| {
                    let dot: T = g.iter().zip(xv).map(|(&d, &a)| d * a).sum();
                    buf[0] -= dot / (sv * sv);
                });
            }
            Op::AddScalar(x, s) => {
                acc(*x, &mut |buf| add_into(buf, g));
                acc(*s, &mut |buf| buf[0] += sum_g());
            }
            Op::MatMul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
                acc(*a, &mut |buf| gemm_nt(g, bt.data(), buf, m, n, k));
                acc(*b, &mut |buf| gemm_tn(at.data(), g, buf, k, m, n));
            }
            Op::MatMulT(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[0]);
                acc(*a, &mut |buf| gemm_nn(g, bt.data(), buf, m, n, k));
                acc(*b, &mut |buf| gemm_tn(g, at.data(), buf, n, m, k));
            }
            Op::Round(x) => acc(*x, &mut |buf| add_into(buf, g)),
            Op::Clip(x, lo, hi) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |buf| {
                    for ((o, &d), &a) in buf.iter_mut().zip(g).zip(xv) {
                        if a >= *lo && a <= *hi {
                            *o += d;
                        }
                    }
                });
            }
            Op::Extremum(x, idx) => acc(*x, &mut |buf| buf[*idx] += g[0]),
            Op::SliceRows(x, start) => {
                let c = self.value(*x).cols();
                acc(*x, &mut |buf| add_into(&mut buf[start * c..start * c + g.len()], g));
            }
            Op::SliceCols(x, start) => {
                let n = self.value(*x).cols();
                let w = node.value.cols();
                acc(*x, &mut |buf| {
                    for (r, grow) in g.chunks(w).enumerate() {
                        add_into(&mut buf[r * n + start..r * n + start + w], grow);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, &mut |buf| add_into(buf, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let width = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &mut |buf| {
                        for (r, brow) in buf.chunks_mut(w).enumerate() {
                            add_into(brow, &g[r * width + col..r * width + col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::AddRowBias(x, bias) => {
                let n = node.value.cols();
                acc(*x, &mut |buf| add_into(buf, g));
                acc(*bias, &mut |buf| {
                    for grow in g.chunks(n) {
                        add_into(buf, grow);
                    }
                });
            }
            Op::LayerNorm(x, rstds) => {
                let n = node.value.cols();
                let nf = T::lit(n as f64);
                let y = node.value.data();
                acc(*x, &mut |buf| {
                    for (r, rstd) in rstds.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let yr = &y[r * n..(r + 1) * n];
                        let mg = gr.iter().copied().sum::<T>() / nf;
                        let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        for j in 0..n {
                            buf[r * n + j] += *rstd * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let n = node.value.cols();
                let y = node.value.data();
                acc(*x, &mut |buf| {
                    for ((brow, grow), yrow) in buf.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((o, &gd), &yv) in brow.iter_mut().zip(grow).zip(yrow) {
                            *o += yv * (gd - dot);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5));
                let three = T::lit(3.0);
                let xv = self.value(*x).data();
                acc(*x, &mut |buf| {
                    for ((o, &d), &a) in buf.iter_mut().zip(g).zip(xv) {
                        let th = (c * (a + k * a * a * a)).tanh();
                        let dth = (T::one() - th * th) * c * (T::one() + three * k * a * a);
                        *o += d * (half * (T::one() + th) + half * a * dth);
                    }
                });
            }
            Op::FakeQuantAct(x, s, lo, hi) => {
                let ident = self.identity_round;
                let xv = self.value(*x).data();
                acc(*x, &mut |buf| {
                    for ((o, &d), &a) in buf.iter_mut().zip(g).zip(xv) {
                        let q = a / *s;
                        let q = if ident { q } else { q.round_half_even() };
                        if q >= *lo && q <= *hi {
                            *o += d;
                        }
                    }
                });
            }
            Op::Mae(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let w = g[0] / T::lit(av.len() as f64);
                let sign = |x: T, y: T| {
                    if x > y {
                        w
                    } else if x < y {
                        -w
                    } else {
                        T::zero()
                    }
                };
                acc(*a, &mut |buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(av).zip(bv) {
                        *o += sign(x, y);
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(av).zip(bv) {
                        *o -= sign(x, y);
                    }
                });
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let w = T::lit(2.0) * g[0] / T::lit(av.len() as f64);
                acc(*a, &mut |buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(av).zip(bv) {
                        *o += w * (x - y);
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(av).zip(bv) {
                        *o -= w * (x - y);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::Reshape(x) => acc(*x, &mut |buf| add_into(buf, g)),
        }
    }
}

#[inline]
fn add_into<T: Scalar>(buf: &mut [T], g: &[T]) {
    for (o, &x) in buf.iter_mut().zip(g) {
        *o += x;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(vals: &[(&str, Tensor<f32>)]) -> (ParamStore<f32>, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = vals
            .iter()
            .map(|(n, t)| s.insert(*n, t.clone(), true).unwrap())
            .collect();
        (s, ids)
    }

    #[test]
    fn sum_gradient_is_ones() {
        let (mut s, ids) = store_with(&[("x", Tensor::new(vec![3], vec![1., -2., 5.]).unwrap())]);
        let mut tape = Tape::new();
        let x = tape.param(&s, ids[0]);
        let loss = tape.sum(x);
        tape.backward(loss, &mut s).unwrap();
        assert_eq!(s.grad(ids[0]).data(), &[1., 1., 1.]);
    }

    #[test]
    fn mae_chain_rule_and_accumulation() {
        let (mut s, ids) = store_with(&[("w", Tensor::scalar(2.0))]);
        let mut tape = Tape::new();
        let w = tape.param(&s, ids[0]);
        let c = tape.scalar(3.0);
        let prod = tape.mul(w, c).unwrap();
        let zero = tape.scalar(0.0);
        let loss = tape.mae(prod, zero).unwrap();
        tape.backward(loss, &mut s).unwrap();
        assert_eq!(s.grad(ids[0]).item(), 3.0);
        tape.backward(loss, &mut s).unwrap();
        assert_eq!(s.grad(ids[0]).item(), 6.0);
        s.zero_grad();
        assert_eq!(s.grad(ids[0]).item(), 0.0);
    }

    #[test]
    fn replay_is_identical() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let (mut s, ids) = store_with(&[
            ("a", Tensor::randn(&[3, 4], 1.0, &mut rng)),
            ("b", Tensor::randn(&[4, 2], 1.0, &mut rng)),
        ]);
        let mut tape = Tape::new();
        let a = tape.param(&s, ids[0]);
        let b = tape.param(&s, ids[1]);
        let p = tape.matmul(a, b).unwrap();
        let g = tape.gelu(p);
        let sm = tape.softmax_rows(g);
        let t = tape.constant(Tensor::zeros(&[3, 2]));
        let loss = tape.mse(sm, t).unwrap();
        tape.backward(loss, &mut s).unwrap();
        let first = (s.grad(ids[0]).clone(), s.grad(ids[1]).clone());
        s.zero_grad();
        tape.backward(loss, &mut s).unwrap();
        assert_eq!(first.0, *s.grad(ids[0]));
        assert_eq!(first.1, *s.grad(ids[1]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let (mut s, ids) = store_with(&[("x", Tensor::zeros(&[2]))]);
        let mut tape = Tape::new();
        let x = tape.param(&s, ids[0]);
        assert!(matches!(tape.backward(x, &mut s), Err(QueptError::Argument(_))));
    }

    #[test]
    fn round_ste_examples() {
        let (mut s, ids) = store_with(&[("x", Tensor::new(vec![3], vec![2.5, 0.0, 0.3]).unwrap())]);
        let mut tape = Tape::new();
        let x = tape.param(&s, ids[0]);
        let r = tape.round_ste(x);
        assert_eq!(tape.value(r).data(), &[2.0, 0.0, 0.0]);
        let loss = tape.sum(r);
        tape.backward(loss, &mut s).unwrap();
        assert_eq!(s.grad(ids[0]).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn clip_ste_examples() {
        let (mut s, ids) = store_with(&[("x", Tensor::new(vec![2], vec![100.0, 0.5]).unwrap())]);
        let mut tape = Tape::new();
        let x = tape.param(&s, ids[0]);
        let c = tape.clip_ste(x, -8.0, 7.0).unwrap();
        assert_eq!(tape.value(c).data(), &[7.0, 0.5]);
        let loss = tape.sum(c);
        tape.backward(loss, &mut s).unwrap();
        assert_eq!(s.grad(ids[0]).data(), &[0.0, 1.0]);
        assert!(tape.clip_ste(x, 1.0, -1.0).is_err());
    }

    #[test]
    fn frozen_params_get_no_grad() {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::<f32>::scalar(1.0), false).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&s, id);
        let loss = tape.sum(w);
        tape.backward(loss, &mut s).unwrap();
        assert_eq!(s.grad(id).item(), 0.0);
    }

    #[test]
    fn store_counts_writes_and_rejects_duplicates() {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::<f32>::scalar(1.0), true).unwrap();
        assert!(s.insert("w", Tensor::scalar(2.0), true).is_err());
        assert_eq!(s.write_count(), 0);
        s.value_mut(id).data_mut()[0] = 3.0;
        assert_eq!(s.write_count(), 1);
        assert_eq!(s.id_of("w"), Some(id));
    }
}

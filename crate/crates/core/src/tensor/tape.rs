//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value. A node requires
//! a gradient when any of its parents does, so constant sub-graphs (frozen base
//! weights, α = 0 reference passes) cost nothing in the backward sweep.
//! [`Tape::backward`] walks the nodes once in reverse from a scalar root.

use super::kernels::gemm;
use super::linalg::Lu;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Linear(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    Symlog(Var),
    Square(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    RmsNorm { x: Var, gain: Var, eps: f64 },
    Sum(Var),
    MeanAxis { x: Var, axis: usize },
    Dot(Var, Var),
    SelectRows { x: Var, rows: Vec<usize> },
    Pick { x: Var, index: usize },
    Stack(Vec<Var>),
    ConcatRows(Vec<Var>),
    ScaleRows { x: Var, s: Var },
    ScaleCols { x: Var, s: Var },
    Solve { a: Var, b: Var, lu: Lu },
    SkewFromLower { p: Var, n: usize },
    CausalAttention { qkv: Var, spans: Vec<(usize, usize)>, heads: usize, probs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, count: usize },
    LogMeanExp(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// `sign(x)·ln(1 + |x|)`
pub fn symlog(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

/// A single-threaded recording of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one [`Tape::backward`] call.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`; `None` only if `v` never required one.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(op, s, &[0, 0])),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Stop-gradient: same value, no gradient flows to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with(self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    /// `sign(x)·ln(1 + |x|)`
    pub fn symlog(&mut self, x: Var) -> Var {
        self.unary(x, Op::Symlog(x), symlog)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// `max(x, floor)` elementwise; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, Op::ClampMin(x, floor), |v| v.max(floor))
    }

    /// `a · b` for matrices a: m×k, b: k×n.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `x · wᵀ` for x: n×in and a weight w: out×in.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let value = self.value(x).matmul_t(self.value(w))?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::Linear(x, w), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        matrix_dims("transpose", self.value(x))?;
        let value = self.value(x).transpose();
        let rg = self.rg(x);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Row-wise softmax of a matrix (or of a vector).
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("shape preserved");
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            log_softmax_in_place(row);
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("shape preserved");
        let rg = self.rg(x);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    /// RMS normalisation of each row followed by a per-column gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let g = self.value(gain);
        let c = t.cols();
        if g.len() != c {
            return Err(Error::dim("rms_norm", t.shape(), g.shape()));
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for (v, gj) in row.iter_mut().zip(g.data()) {
                *v *= inv * gj;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("shape preserved");
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(value, Op::RmsNorm { x, gain, eps }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean of a matrix over `axis` (0: over rows, giving a column vector of
    /// length `cols`; 1: over columns, giving length `rows`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = matrix_dims("mean_axis", self.value(x))?;
        let t = self.value(x);
        let value = match axis {
            0 => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, v) in out.iter_mut().zip(t.row(i)) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o /= r.max(1) as f64);
                Tensor::vector(out)
            }
            1 => Tensor::vector((0..r).map(|i| t.row(i).iter().sum::<f64>() / c.max(1) as f64).collect()),
            _ => return Err(Error::dim("mean_axis", t.shape(), &[axis])),
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::MeanAxis { x, axis }, rg))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("dot", self.value(a), self.value(b))?;
        let d = super::dot(self.value(a).data(), self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(d), Op::Dot(a, b), rg))
    }

    /// Euclidean norm with the squared norm floored at `floor²`.
    pub fn norm(&mut self, x: Var, floor: f64) -> Result<Var> {
        let ss = self.dot(x, x)?;
        let ss = self.clamp_min(ss, floor * floor);
        Ok(self.sqrt(ss))
    }

    /// Cosine similarity of two equal-shape tensors, norms floored at 1e-8.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.dot(a, b)?;
        let na = self.norm(a, 1e-8)?;
        let nb = self.norm(b, 1e-8)?;
        let den = self.mul(na, nb)?;
        self.div(d, den)
    }

    /// Elementwise `a / b` built from primitives (`b` must be positive).
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let lb = self.ln(b);
        let nlb = self.neg(lb);
        let inv = self.exp(nlb);
        self.mul(a, inv)
    }

    /// Gathers rows of a matrix (repeats allowed).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, _) = matrix_dims("select_rows", t)?;
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::dim("select_rows", t.shape(), &[*bad]));
        }
        let value = t.select_rows(rows);
        let rg = self.rg(x);
        Ok(self.push(value, Op::SelectRows { x, rows: rows.to_vec() }, rg))
    }

    /// One element of `x` (flat index) as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if index >= t.len() {
            return Err(Error::dim("pick", t.shape(), &[index]));
        }
        let v = t.data()[index];
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }, rg))
    }

    /// Stacks scalars into a vector.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            let t = self.value(x);
            if t.len() != 1 {
                return Err(Error::dim("stack", t.shape(), &[1]));
            }
            out.push(t.item());
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::vector(out), Op::Stack(xs.to_vec()), rg))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let c = xs.first().map_or(0, |&x| self.value(x).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let t = self.value(x);
            let (r, cc) = matrix_dims("concat_rows", t)?;
            if cc != c {
                return Err(Error::dim("concat_rows", &[rows, c], t.shape()));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::new(vec![rows, c], data)?, Op::ConcatRows(xs.to_vec()), rg))
    }

    /// `diag(s) · x`
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let t = self.value(x);
        let sv = self.value(s);
        let (r, c) = matrix_dims("scale_rows", t)?;
        if sv.len() != r {
            return Err(Error::dim("scale_rows", t.shape(), sv.shape()));
        }
        let mut out = t.data().to_vec();
        for (i, row) in out.chunks_mut(c).enumerate() {
            let k = sv.data()[i];
            row.iter_mut().for_each(|v| *v *= k);
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::ScaleRows { x, s }, rg))
    }

    /// `x · diag(s)`
    pub fn scale_cols(&mut self, x: Var, s: Var) -> Result<Var> {
        let t = self.value(x);
        let sv = self.value(s);
        let (r, c) = matrix_dims("scale_cols", t)?;
        if sv.len() != c {
            return Err(Error::dim("scale_cols", t.shape(), sv.shape()));
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            for (v, k) in row.iter_mut().zip(sv.data()) {
                *v *= k;
            }
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::ScaleCols { x, s }, rg))
    }

    /// `a⁻¹ · b` for square `a`; differentiable in both operands.
    pub fn solve(&mut self, a: Var, b: Var) -> Result<Var> {
        let at = self.value(a);
        let bt = self.value(b);
        let (n, n2) = matrix_dims("solve", at)?;
        let (bn, bc) = matrix_dims("solve", bt)?;
        if n != n2 || bn != n {
            return Err(Error::dim("solve", at.shape(), bt.shape()));
        }
        let lu = Lu::factor(at)?;
        let x = lu.solve(bt.data(), bc, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, bc], x)?, Op::Solve { a, b, lu }, rg))
    }

    /// Expands `n(n-1)/2` strictly-lower-triangular parameters into the
    /// skew-symmetric matrix `L - Lᵀ`.
    pub fn skew_from_lower(&mut self, p: Var, n: usize) -> Result<Var> {
        let pt = self.value(p);
        if pt.len() != n * n.saturating_sub(1) / 2 {
            return Err(Error::dim("skew_from_lower", pt.shape(), &[n, n]));
        }
        let value = skew_from_lower(pt.data(), n);
        let rg = self.rg(p);
        Ok(self.push(value, Op::SkewFromLower { p, n }, rg))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `qkv` is N×3d with column blocks `[q | k | v]`; `spans` lists
    /// `(first_row, length)` of each independent sequence.
    pub fn causal_attention(&mut self, qkv: Var, spans: &[(usize, usize)], heads: usize) -> Result<Var> {
        let t = self.value(qkv);
        let (n, c3) = matrix_dims("causal_attention", t)?;
        if c3 % 3 != 0 || (c3 / 3) % heads != 0 {
            return Err(Error::dim("causal_attention", t.shape(), &[heads]));
        }
        if spans.iter().any(|&(s, l)| s + l > n) {
            return Err(Error::dim("causal_attention", t.shape(), &[n]));
        }
        let d = c3 / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let x = t.data();
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(spans.iter().map(|&(_, l)| l * l).sum::<usize>() * heads);
        for &(start, len) in spans {
            for h in 0..heads {
                let qo = h * dh;
                let ko = d + h * dh;
                let vo = 2 * d + h * dh;
                let base = probs.len();
                probs.resize(base + len * len, 0.0);
                for i in 0..len {
                    let qi = &x[(start + i) * c3 + qo..(start + i) * c3 + qo + dh];
                    let prow = &mut probs[base + i * len..base + (i + 1) * len];
                    for j in 0..=i {
                        let kj = &x[(start + j) * c3 + ko..(start + j) * c3 + ko + dh];
                        prow[j] = super::dot(qi, kj) * scale;
                    }
                    softmax_in_place(&mut prow[..=i]);
                    let orow = &mut out[(start + i) * d + h * dh..(start + i) * d + (h + 1) * dh];
                    for j in 0..=i {
                        let p = prow[j];
                        let vj = &x[(start + j) * c3 + vo..(start + j) * c3 + vo + dh];
                        for (o, v) in orow.iter_mut().zip(vj) {
                            *o += p * v;
                        }
                    }
                }
            }
        }
        let rg = self.rg(qkv);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::CausalAttention {
                qkv,
                spans: spans.to_vec(),
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Mean next-token cross-entropy over rows with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        let (r, c) = matrix_dims("cross_entropy", t)?;
        if targets.len() != r {
            return Err(Error::dim("cross_entropy", t.shape(), &[targets.len()]));
        }
        let mut total = 0.0;
        let mut count = 0;
        for (i, tgt) in targets.iter().enumerate() {
            if let Some(k) = *tgt {
                if k >= c {
                    return Err(Error::dim("cross_entropy", t.shape(), &[k]));
                }
                let mut row = t.row(i).to_vec();
                log_softmax_in_place(&mut row);
                total -= row[k];
                count += 1;
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// `log(mean(exp(x)))` over all entries, computed stably.
    pub fn log_mean_exp(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let m = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = d.iter().map(|v| (v - m).exp()).sum();
        let value = m + (s / d.len() as f64).ln();
        let rg = self.rg(x);
        self.push(Tensor::scalar(value), Op::LogMeanExp(x), rg)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rt = self.value(root);
        if rt.len() != 1 {
            return Err(Error::dim("backward", rt.shape(), &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (&node.op, node.requires_grad) {
                    (Op::Leaf, true) => Some(match g {
                        Some(d) => Tensor::new(node.value.shape().to_vec(), d).expect("grad shape"),
                        None => Tensor::zeros(node.value.shape()),
                    }),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(slot);
            }
        };
        let val = |v: Var| &nodes[v.0].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| axpy(d, g, 1.0));
                acc(*b, &mut |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| axpy(d, g, 1.0));
                acc(*b, &mut |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * av[k];
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |d| axpy(d, g, *s)),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |d| axpy(d, g, 1.0)),
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d| gemm(m, n, k, g, false, bv, true, d, 1.0));
                acc(*b, &mut |d| gemm(k, m, n, av, true, g, false, d, 1.0));
            }
            Op::Linear(x, w) => {
                let (n, inp) = (val(*x).rows(), val(*x).cols());
                let o = val(*w).rows();
                let (xv, wv) = (val(*x).data(), val(*w).data());
                acc(*x, &mut |d| gemm(n, o, inp, g, false, wv, false, d, 1.0));
                acc(*w, &mut |d| gemm(o, n, inp, g, true, xv, false, d, 1.0));
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).rows(), val(*x).cols());
                acc(*x, &mut |d| {
                    for ii in 0..r {
                        for jj in 0..c {
                            d[ii * c + jj] += g[jj * r + ii];
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        if xv[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::ClampMin(x, floor) => {
                let xv = val(*x).data();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        if xv[k] > *floor {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let y = out.data();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                });
            }
            Op::Exp(x) => {
                let y = out.data();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * y[k];
                    }
                });
            }
            Op::Log(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / xv[k];
                    }
                });
            }
            Op::Sqrt(x) => {
                let y = out.data();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * 0.5 / y[k];
                    }
                });
            }
            Op::Symlog(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / (1.0 + xv[k].abs());
                    }
                });
            }
            Op::Abs(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * sign(xv[k]);
                    }
                });
            }
            Op::Square(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * 2.0 * xv[k];
                    }
                });
            }
            Op::Softmax(x) => {
                let y = out.data();
                let c = out.cols().max(1);
                acc(*x, &mut |d| {
                    for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for k in 0..c {
                            dr[k] += yr[k] * (gr[k] - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = out.data();
                let c = out.cols().max(1);
                acc(*x, &mut |d| {
                    for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let s: f64 = gr.iter().sum();
                        for k in 0..c {
                            dr[k] += gr[k] - yr[k].exp() * s;
                        }
                    }
                });
            }
            Op::RmsNorm { x, gain, eps } => {
                let xv = val(*x).data();
                let gv = val(*gain).data();
                let c = gv.len();
                let inv: Vec<f64> = xv
                    .chunks(c)
                    .map(|row| 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / c as f64 + eps).sqrt())
                    .collect();
                acc(*gain, &mut |d| {
                    for (r, (xr, gr)) in xv.chunks(c).zip(g.chunks(c)).enumerate() {
                        for k in 0..c {
                            d[k] += gr[k] * xr[k] * inv[r];
                        }
                    }
                });
                acc(*x, &mut |d| {
                    for (r, ((dr, xr), gr)) in d.chunks_mut(c).zip(xv.chunks(c)).zip(g.chunks(c)).enumerate() {
                        // dxn = g*gain; dx = inv*(dxn - xn*mean(dxn*xn))
                        let mut m = 0.0;
                        for k in 0..c {
                            m += gr[k] * gv[k] * xr[k] * inv[r];
                        }
                        m /= c as f64;
                        for k in 0..c {
                            dr[k] += inv[r] * (gr[k] * gv[k] - xr[k] * inv[r] * m);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::MeanAxis { x, axis } => {
                let (r, c) = (val(*x).rows(), val(*x).cols());
                acc(*x, &mut |d| {
                    for ii in 0..r {
                        for jj in 0..c {
                            d[ii * c + jj] += if *axis == 0 { g[jj] / r as f64 } else { g[ii] / c as f64 };
                        }
                    }
                });
            }
            Op::Dot(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d| axpy(d, bv, g[0]));
                acc(*b, &mut |d| axpy(d, av, g[0]));
            }
            Op::SelectRows { x, rows } => {
                let c = val(*x).cols();
                acc(*x, &mut |d| {
                    for (k, &r) in rows.iter().enumerate() {
                        axpy(&mut d[r * c..(r + 1) * c], &g[k * c..(k + 1) * c], 1.0);
                    }
                });
            }
            Op::Pick { x, index } => acc(*x, &mut |d| d[*index] += g[0]),
            Op::Stack(xs) => {
                for (k, x) in xs.iter().enumerate() {
                    acc(*x, &mut |d| d[0] += g[k]);
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for x in xs {
                    let n = val(*x).len();
                    acc(*x, &mut |d| axpy(d, &g[off..off + n], 1.0));
                    off += n;
                }
            }
            Op::ScaleRows { x, s } => {
                let c = val(*x).cols();
                let (xv, sv) = (val(*x).data(), val(*s).data());
                acc(*x, &mut |d| {
                    for (r, (dr, gr)) in d.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        axpy(dr, gr, sv[r]);
                    }
                });
                acc(*s, &mut |d| {
                    for (r, (xr, gr)) in xv.chunks(c).zip(g.chunks(c)).enumerate() {
                        d[r] += super::dot(xr, gr);
                    }
                });
            }
            Op::ScaleCols { x, s } => {
                let c = val(*x).cols();
                let (xv, sv) = (val(*x).data(), val(*s).data());
                acc(*x, &mut |d| {
                    for (dr, gr) in d.chunks_mut(c).zip(g.chunks(c)) {
                        for k in 0..c {
                            dr[k] += gr[k] * sv[k];
                        }
                    }
                });
                acc(*s, &mut |d| {
                    for (xr, gr) in xv.chunks(c).zip(g.chunks(c)) {
                        for k in 0..c {
                            d[k] += gr[k] * xr[k];
                        }
                    }
                });
            }
            Op::Solve { a, b, lu } => {
                let n = val(*a).rows();
                let bc = val(*b).cols();
                // dB = A⁻ᵀ dX ; dA = -dB Xᵀ
                let db = lu.solve(g, bc, true);
                let xv = out.data();
                acc(*b, &mut |d| axpy(d, &db, 1.0));
                acc(*a, &mut |d| {
                    let mut tmp = vec![0.0; n * n];
                    gemm(n, bc, n, &db, false, xv, true, &mut tmp, 0.0);
                    axpy(d, &tmp, -1.0);
                });
            }
            Op::SkewFromLower { p, n } => {
                acc(*p, &mut |d| {
                    let mut idx = 0;
                    for r in 1..*n {
                        for c in 0..r {
                            d[idx] += g[r * n + c] - g[c * n + r];
                            idx += 1;
                        }
                    }
                });
            }
            Op::CausalAttention { qkv, spans, heads, probs } => {
                let x = val(*qkv).data();
                let c3 = val(*qkv).cols();
                let d_model = c3 / 3;
                let dh = d_model / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                acc(*qkv, &mut |dx| {
                    let mut pbase = 0;
                    let mut dp = Vec::new();
                    for &(start, len) in spans {
                        for h in 0..*heads {
                            let qo = h * dh;
                            let ko = d_model + h * dh;
                            let vo = 2 * d_model + h * dh;
                            let p = &probs[pbase..pbase + len * len];
                            pbase += len * len;
                            for i in 0..len {
                                let gi = &g[(start + i) * d_model + h * dh..(start + i) * d_model + (h + 1) * dh];
                                dp.clear();
                                dp.resize(i + 1, 0.0);
                                for j in 0..=i {
                                    let vj = &x[(start + j) * c3 + vo..(start + j) * c3 + vo + dh];
                                    dp[j] = super::dot(gi, vj);
                                    let pij = p[i * len + j];
                                    let dvj = &mut dx[(start + j) * c3 + vo..(start + j) * c3 + vo + dh];
                                    axpy(dvj, gi, pij);
                                }
                                let s: f64 = (0..=i).map(|j| p[i * len + j] * dp[j]).sum();
                                for j in 0..=i {
                                    let ds = p[i * len + j] * (dp[j] - s) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    for t in 0..dh {
                                        let kjt = x[(start + j) * c3 + ko + t];
                                        let qit = x[(start + i) * c3 + qo + t];
                                        dx[(start + i) * c3 + qo + t] += ds * kjt;
                                        dx[(start + j) * c3 + ko + t] += ds * qit;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, count } => {
                if *count == 0 {
                    return Ok(());
                }
                let lv = val(*logits);
                let c = lv.cols();
                let w = g[0] / *count as f64;
                acc(*logits, &mut |d| {
                    for (r, tgt) in targets.iter().enumerate() {
                        if let Some(k) = tgt {
                            let mut row = lv.row(r).to_vec();
                            softmax_in_place(&mut row);
                            row[*k] -= 1.0;
                            axpy(&mut d[r * c..(r + 1) * c], &row, w);
                        }
                    }
                });
            }
            Op::LogMeanExp(x) => {
                let xv = val(*x).data();
                let mut sm = xv.to_vec();
                softmax_in_place(&mut sm);
                acc(*x, &mut |d| axpy(d, &sm, g[0]));
            }
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter_mut().for_each(|v| *v -= lse);
}

pub(crate) fn skew_from_lower(p: &[f64], n: usize) -> Tensor {
    let mut a = Tensor::zeros(&[n, n]);
    let mut idx = 0;
    for r in 1..n {
        for c in 0..r {
            a.set(r, c, p[idx]);
            a.set(c, r, -p[idx]);
            idx += 1;
        }
    }
    a
}

//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive in creation order, so the node list
//! is already topologically sorted. [`Tape::backward`] walks it in reverse
//! once, propagating adjoints, and accumulates them into the leaves that
//! were created with `requires_grad`. Leaf gradients keep accumulating
//! across calls until [`Tape::zero_grad`].

use std::fmt;

use super::kernels;
use super::tensor::{axis_blocks, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adjoint of a user-registered primitive: given the input values, the
/// output value and the output adjoint, returns one adjoint per input.
pub type CustomBackward = dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + Send + Sync;

enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Mean(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    L2Normalize(Var, Vec<f64>),
    Cosine(Var, Var),
    Exp(Var),
    Log(Var),
    Gather(Var, Vec<usize>),
    KlDiv(Var, Var),
    PairwiseDistance(Var, Var),
    L2Norm(Var),
    Custom(Vec<Var>, Box<CustomBackward>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::BatchMatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Hadamard(a, b)
            | Op::ScaleBy(a, b)
            | Op::Cosine(a, b)
            | Op::KlDiv(a, b)
            | Op::PairwiseDistance(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Slice { x, .. }
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::Mean(x, _)
            | Op::SumAll(x)
            | Op::MeanAll(x)
            | Op::Softmax(x, _)
            | Op::Gelu(x)
            | Op::L2Normalize(x, _)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::L2Norm(x)
            | Op::Gather(x, _) => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Concat(xs, _) | Op::Custom(xs, _) => xs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    needs_grad: bool,
    grad: Option<Tensor>,
}

/// Records a differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
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

    /// Adds a leaf. Gradients are accumulated only for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Overwrites a leaf value in place, keeping the graph layout. Used to
    /// replay a recorded program on perturbed inputs.
    pub fn set_leaf_value(&mut self, v: Var, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Usage("set_leaf_value on a non-leaf node".into()));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::shape("set_leaf_value", node.value.shape(), value.shape()));
        }
        node.value = value;
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    // ----- primitives -------------------------------------------------------

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        kernels::mm_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut c);
        Ok(self.push(Tensor::from_parts(vec![m, n], c), Op::MatMul(a, b)))
    }

    /// Matrix product over the last two axes, with identical leading axes.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(Error::shape("batch_matmul", sa, sb));
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut c = vec![0.0; batch * m * n];
        for i in 0..batch {
            kernels::mm_nn(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut c[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push(Tensor::from_parts(shape, c), Op::BatchMatMul(a, b)))
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let bd = self.value(b).data();
        let nb = bd.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % nb]))
            .collect();
        Tensor::from_parts(av.shape().to_vec(), data)
    }

    /// `a + b`, where `b`'s shape equals `a`'s or a trailing part of it.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("add", a, b)?;
        let out = self.broadcast_binary(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// `a - b`, broadcasting like [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("sub", a, b)?;
        let out = self.broadcast_binary(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Entry-wise product of equally shaped tensors.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("hadamard", self.shape(a), self.shape(b)));
        }
        let out = self.broadcast_binary(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Hadamard(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    /// `x · s` for a single-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale_by", self.shape(s), &[1]));
        }
        let c = self.value(s).data()[0];
        let out = self.value(x).map(|v| v * c);
        Ok(self.push(out, Op::ScaleBy(x, s)))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Usage(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let same_rest = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (p, q))| i == axis || p == q);
            if !same_rest {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_blocks(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let ext = self.shape(x)[axis];
                let d = self.value(x).data();
                data.extend_from_slice(&d[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(xs.to_vec(), axis)))
    }

    /// The sub-range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::Usage(format!(
                "slice [{start}, {}) on axis {axis} of {s:?}",
                start + len
            )));
        }
        let (outer, ext, inner) = axis_blocks(&s, axis);
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(Tensor::from_parts(shape, data), Op::Slice { x, axis, start }))
    }

    /// Splits `x` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let total: usize = sizes.iter().sum();
        if self.shape(x).get(axis) != Some(&total) {
            return Err(Error::shape("split", self.shape(x), sizes));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Usage(format!("invalid permutation {axes:?} for {s:?}")));
        }
        let (shape, data) = kernels::permute(self.value(x).data(), s, axes);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Permute(x, axes.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::Usage("transpose needs at least two axes".into()));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Usage(format!("mean axis {axis} out of range for {s:?}")));
        }
        let (outer, ext, inner) = axis_blocks(&s, axis);
        let d = self.value(x).data();
        // Incremental mean, exact for repeated values.
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let k = (e + 1) as f64;
                let src = &d[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (acc, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += (v - *acc) / k;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mean(x, axis)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(x))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Usage(format!("softmax axis {axis} out of range for {s:?}")));
        }
        let d = self.value(x).data();
        if d.iter().any(|v| v.is_nan()) {
            return Err(Error::numeric("softmax", "NaN input"));
        }
        let (outer, ext, inner) = axis_blocks(&s, axis);
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| (o * ext + e) * inner + i;
                let max = (0..ext).map(|e| d[at(e)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for e in 0..ext {
                    let v = (d[at(e)] - max).exp();
                    out[at(e)] = v;
                    sum += v;
                }
                for e in 0..ext {
                    out[at(e)] /= sum;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(s, out), Op::Softmax(x, axis)))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias` (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or_else(|| Error::Usage("layer_norm on a scalar".into()))?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape("layer_norm", &s, self.shape(gain)));
        }
        let d = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = d.len() / n;
        let mut xhat = vec![0.0; d.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; d.len()];
        for r in 0..rows {
            let row = &d[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let xh = (row[j] - mu) * rs;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(s, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        self.push(out, Op::Gelu(x))
    }

    /// Scales each slice along the last axis to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().unwrap_or(&1);
        let d = self.value(x).data();
        let rows = d.len() / n;
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![0.0; d.len()];
        for r in 0..rows {
            let row = &d[r * n..(r + 1) * n];
            let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(nr > 0.0) || !nr.is_finite() {
                return Err(Error::numeric("l2_normalize", format!("row {r} has norm {nr}")));
            }
            norms.push(nr);
            for j in 0..n {
                out[r * n + j] = row[j] / nr;
            }
        }
        Ok(self.push(Tensor::from_parts(s, out), Op::L2Normalize(x, norms)))
    }

    /// Cosine similarity along the last axis; the result drops that axis.
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        let s = self.shape(u).to_vec();
        if s != self.shape(v) || s.is_empty() {
            return Err(Error::shape("cosine", &s, self.shape(v)));
        }
        let n = s[s.len() - 1];
        let (ud, vd) = (self.value(u).data(), self.value(v).data());
        let rows = ud.len() / n;
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let (a, b) = (&ud[r * n..(r + 1) * n], &vd[r * n..(r + 1) * n]);
            let (nu, nv) = (norm(a), norm(b));
            if !(nu > 0.0 && nv > 0.0) {
                return Err(Error::numeric("cosine", format!("zero-norm input at row {r}")));
            }
            out.push((dot(a, b) / (nu * nv)).clamp(-1.0, 1.0));
        }
        Ok(self.push(Tensor::from_parts(s[..s.len() - 1].to_vec(), out), Op::Cosine(u, v)))
    }

    /// Euclidean norm along the last axis; the result drops that axis.
    /// The adjoint at a zero row is taken as zero.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(Error::shape("l2_norm", &s, &[]));
        }
        let n = s[s.len() - 1];
        let out = self.value(x).data().chunks(n).map(norm).collect();
        Ok(self.push(Tensor::from_parts(s[..s.len() - 1].to_vec(), out), Op::L2Norm(x)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::numeric("log", format!("non-positive input {bad}")));
        }
        let out = self.value(x).map(f64::ln);
        Ok(self.push(out, Op::Log(x)))
    }

    /// Selects rows (first-axis slices) of `table`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let rows = t.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Usage(format!("gather index {bad} out of range for {rows} rows")));
        }
        if indices.is_empty() {
            return Err(Error::Usage("gather with no indices".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * t.numel() / rows);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Gather(table, indices.to_vec())))
    }

    /// `Σ q·ln(q/p)` along the last axis (the result drops that axis).
    /// Terms with `q = 0` contribute nothing.
    pub fn kl_divergence(&mut self, q: Var, p: Var) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s != self.shape(p) || s.is_empty() {
            return Err(Error::shape("kl_divergence", &s, self.shape(p)));
        }
        let n = s[s.len() - 1];
        let (qd, pd) = (self.value(q).data(), self.value(p).data());
        let rows = qd.len() / n;
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let (qr, pr) = (&qd[r * n..(r + 1) * n], &pd[r * n..(r + 1) * n]);
            for (name, dist) in [("q", qr), ("p", pr)] {
                let sum: f64 = dist.iter().sum();
                if (sum - 1.0).abs() > 1e-8 || dist.iter().any(|&v| v < 0.0 || v.is_nan()) {
                    return Err(Error::numeric(
                        "kl_divergence",
                        format!("{name} row {r} is not a distribution (sum {sum})"),
                    ));
                }
            }
            let mut acc = 0.0;
            for (&qi, &pi) in qr.iter().zip(pr) {
                if qi > 0.0 {
                    if !(pi > 0.0) {
                        return Err(Error::numeric(
                            "kl_divergence",
                            format!("p is zero where q = {qi} (row {r})"),
                        ));
                    }
                    acc += qi * (qi / pi).ln();
                }
            }
            out.push(acc);
        }
        Ok(self.push(Tensor::from_parts(s[..s.len() - 1].to_vec(), out), Op::KlDiv(q, p)))
    }

    /// Euclidean distances between every row of `a[n×d]` and every row of `b[m×d]`.
    pub fn pairwise_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("pairwise_distance", sa, sb));
        }
        let (n, m, d) = (sa[0], sb[0], sa[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                let s: f64 = (0..d).map(|k| (ad[i * d + k] - bd[j * d + k]).powi(2)).sum();
                out.push(s.sqrt());
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::PairwiseDistance(a, b)))
    }

    /// Registers a primitive outside the built-in set. The adjoint closure
    /// must return one tensor per input, shaped like that input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        forward: impl FnOnce(&[&Tensor]) -> Result<Tensor>,
        backward: Box<CustomBackward>,
    ) -> Result<Var> {
        let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
        let out = forward(&vals)?;
        Ok(self.push(out, Op::Custom(inputs.to_vec(), backward)))
    }

    // ----- reverse pass -----------------------------------------------------

    /// Propagates d(loss)/d(node) to every leaf created with `requires_grad`,
    /// adding onto any gradient already accumulated there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward seed must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::from_parts(self.shape(loss).to_vec(), vec![1.0]));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                adj[i] = Some(g);
                continue;
            }
            for (input, contribution) in self.input_adjoints(i, &g) {
                match &mut adj[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        for (i, a) in adj.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if let (true, Some(a)) = (node.requires_grad, a) {
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&a),
                    slot @ None => *slot = Some(a),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adjoint contributions of node `i` to those of its inputs that need them.
    fn input_adjoints(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        let mut emit = |v: Var, make: &dyn Fn() -> Tensor| {
            if self.needs(v) {
                out.push((v, make()));
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                emit(*a, &|| {
                    let mut da = vec![0.0; m * k];
                    kernels::mm_nt(gd, bv.data(), m, n, k, &mut da);
                    Tensor::from_parts(vec![m, k], da)
                });
                emit(*b, &|| {
                    let mut db = vec![0.0; k * n];
                    kernels::mm_tn(av.data(), gd, m, k, n, &mut db);
                    Tensor::from_parts(vec![k, n], db)
                });
            }
            Op::BatchMatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let r = av.ndim();
                let (m, k, n) = (av.shape()[r - 2], av.shape()[r - 1], bv.shape()[r - 1]);
                let batch = av.numel() / (m * k);
                emit(*a, &|| {
                    let mut da = vec![0.0; av.numel()];
                    for t in 0..batch {
                        kernels::mm_nt(
                            &gd[t * m * n..(t + 1) * m * n],
                            &bv.data()[t * k * n..(t + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut da[t * m * k..(t + 1) * m * k],
                        );
                    }
                    Tensor::from_parts(av.shape().to_vec(), da)
                });
                emit(*b, &|| {
                    let mut db = vec![0.0; bv.numel()];
                    for t in 0..batch {
                        kernels::mm_tn(
                            &av.data()[t * m * k..(t + 1) * m * k],
                            &gd[t * m * n..(t + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut db[t * k * n..(t + 1) * k * n],
                        );
                    }
                    Tensor::from_parts(bv.shape().to_vec(), db)
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                emit(*a, &|| g.clone());
                emit(*b, &|| {
                    let bv = val(*b);
                    let nb = bv.numel();
                    let mut db = vec![0.0; nb];
                    for (j, x) in gd.iter().enumerate() {
                        db[j % nb] += sign * x;
                    }
                    Tensor::from_parts(bv.shape().to_vec(), db)
                });
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                emit(*a, &|| zip_map(g, bv, |x, y| x * y));
                emit(*b, &|| zip_map(g, av, |x, y| x * y));
            }
            Op::Scale(x, c) => emit(*x, &|| g.map(|v| v * c)),
            Op::ScaleBy(x, s) => {
                let (xv, sv) = (val(*x), val(*s));
                let c = sv.data()[0];
                emit(*x, &|| g.map(|v| v * c));
                emit(*s, &|| {
                    let d = gd.iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                    Tensor::from_parts(sv.shape().to_vec(), vec![d])
                });
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_blocks(y.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let xv = val(x);
                    let ext = xv.shape()[*axis];
                    emit(x, &|| {
                        let mut d = Vec::with_capacity(xv.numel());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[base..base + ext * inner]);
                        }
                        Tensor::from_parts(xv.shape().to_vec(), d)
                    });
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => emit(*x, &|| {
                let xv = val(*x);
                let (outer, ext, inner) = axis_blocks(xv.shape(), *axis);
                let len = y.shape()[*axis];
                let mut d = vec![0.0; xv.numel()];
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    d[dst..dst + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                Tensor::from_parts(xv.shape().to_vec(), d)
            }),
            Op::Reshape(x) => emit(*x, &|| Tensor::from_parts(val(*x).shape().to_vec(), gd.to_vec())),
            Op::Permute(x, axes) => emit(*x, &|| {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (shape, d) = kernels::permute(gd, y.shape(), &inverse);
                Tensor::from_parts(shape, d)
            }),
            Op::Mean(x, axis) => emit(*x, &|| {
                let xv = val(*x);
                let (outer, ext, inner) = axis_blocks(xv.shape(), *axis);
                let mut d = vec![0.0; xv.numel()];
                for o in 0..outer {
                    for e in 0..ext {
                        for i in 0..inner {
                            d[(o * ext + e) * inner + i] = gd[o * inner + i] / ext as f64;
                        }
                    }
                }
                Tensor::from_parts(xv.shape().to_vec(), d)
            }),
            Op::SumAll(x) => emit(*x, &|| Tensor::full(val(*x).shape().to_vec(), gd[0])),
            Op::MeanAll(x) => emit(*x, &|| {
                let xv = val(*x);
                Tensor::full(xv.shape().to_vec(), gd[0] / xv.numel() as f64)
            }),
            Op::Softmax(x, axis) => emit(*x, &|| {
                let (outer, ext, inner) = axis_blocks(y.shape(), *axis);
                let yd = y.data();
                let mut d = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |e: usize| (o * ext + e) * inner + i;
                        let dotp: f64 = (0..ext).map(|e| gd[at(e)] * yd[at(e)]).sum();
                        for e in 0..ext {
                            d[at(e)] = yd[at(e)] * (gd[at(e)] - dotp);
                        }
                    }
                }
                Tensor::from_parts(y.shape().to_vec(), d)
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = *y.shape().last().unwrap();
                let rows = y.numel() / n;
                let gv = val(*gain).data();
                emit(*x, &|| {
                    let mut d = vec![0.0; y.numel()];
                    for r in 0..rows {
                        let sl = r * n..(r + 1) * n;
                        let (gr, xh) = (&gd[sl.clone()], &xhat[sl.clone()]);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            let dxh = gr[j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        for j in 0..n {
                            d[r * n + j] = rstd[r] * (gr[j] * gv[j] - m1 - xh[j] * m2);
                        }
                    }
                    Tensor::from_parts(y.shape().to_vec(), d)
                });
                emit(*gain, &|| {
                    let mut d = vec![0.0; n];
                    for (k, (gv, xh)) in gd.iter().zip(xhat).enumerate() {
                        d[k % n] += gv * xh;
                    }
                    Tensor::from_parts(vec![n], d)
                });
                emit(*bias, &|| {
                    let mut d = vec![0.0; n];
                    for (k, gv) in gd.iter().enumerate() {
                        d[k % n] += gv;
                    }
                    Tensor::from_parts(vec![n], d)
                });
            }
            Op::Gelu(x) => emit(*x, &|| zip_map(g, val(*x), |gv, xv| gv * kernels::gelu_grad(xv))),
            Op::L2Normalize(x, norms) => emit(*x, &|| {
                let n = *y.shape().last().unwrap_or(&1);
                let yd = y.data();
                let mut d = vec![0.0; yd.len()];
                for (r, nr) in norms.iter().enumerate() {
                    let sl = r * n..(r + 1) * n;
                    let proj = dot(&gd[sl.clone()], &yd[sl.clone()]);
                    for j in sl {
                        d[j] = (gd[j] - yd[j] * proj) / nr;
                    }
                }
                Tensor::from_parts(y.shape().to_vec(), d)
            }),
            Op::Cosine(u, v) => {
                let (uv, vv) = (val(*u), val(*v));
                let n = *uv.shape().last().unwrap();
                let one_side = |a: &Tensor, b: &Tensor| {
                    let (ad, bd) = (a.data(), b.data());
                    let mut d = vec![0.0; ad.len()];
                    for r in 0..gd.len() {
                        let sl = r * n..(r + 1) * n;
                        let (ar, br) = (&ad[sl.clone()], &bd[sl.clone()]);
                        let (na, nb) = (norm(ar), norm(br));
                        let c = dot(ar, br) / (na * nb);
                        for j in 0..n {
                            d[r * n + j] = gd[r] * (br[j] / (na * nb) - c * ar[j] / (na * na));
                        }
                    }
                    Tensor::from_parts(a.shape().to_vec(), d)
                };
                emit(*u, &|| one_side(uv, vv));
                emit(*v, &|| one_side(vv, uv));
            }
            Op::L2Norm(x) => emit(*x, &|| {
                let xv = val(*x);
                let n = *xv.shape().last().unwrap();
                let yd = y.data();
                let d = xv
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, &xi)| if yd[k / n] > 0.0 { gd[k / n] * xi / yd[k / n] } else { 0.0 })
                    .collect();
                Tensor::from_parts(xv.shape().to_vec(), d)
            }),
            Op::Exp(x) => emit(*x, &|| zip_map(g, y, |gv, yv| gv * yv)),
            Op::Log(x) => emit(*x, &|| zip_map(g, val(*x), |gv, xv| gv / xv)),
            Op::Gather(table, indices) => emit(*table, &|| {
                let tv = val(*table);
                let w = tv.numel() / tv.shape()[0];
                let mut d = vec![0.0; tv.numel()];
                for (k, &row) in indices.iter().enumerate() {
                    for j in 0..w {
                        d[row * w + j] += gd[k * w + j];
                    }
                }
                Tensor::from_parts(tv.shape().to_vec(), d)
            }),
            Op::KlDiv(q, p) => {
                let (qv, pv) = (val(*q), val(*p));
                let n = *qv.shape().last().unwrap();
                emit(*q, &|| {
                    let d = qv
                        .data()
                        .iter()
                        .zip(pv.data())
                        .enumerate()
                        .map(|(k, (&qi, &pi))| gd[k / n] * ((qi.max(1e-30) / pi).ln() + 1.0))
                        .collect();
                    Tensor::from_parts(qv.shape().to_vec(), d)
                });
                emit(*p, &|| {
                    let d = qv
                        .data()
                        .iter()
                        .zip(pv.data())
                        .enumerate()
                        .map(|(k, (&qi, &pi))| if qi > 0.0 { -gd[k / n] * qi / pi } else { 0.0 })
                        .collect();
                    Tensor::from_parts(pv.shape().to_vec(), d)
                });
            }
            Op::PairwiseDistance(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, m, dim) = (av.shape()[0], bv.shape()[0], av.shape()[1]);
                let (ad, bd, yd) = (av.data(), bv.data(), y.data());
                let coeff = |i: usize, j: usize| {
                    let dist = yd[i * m + j];
                    if dist > 0.0 {
                        gd[i * m + j] / dist
                    } else {
                        0.0
                    }
                };
                emit(*a, &|| {
                    let mut d = vec![0.0; ad.len()];
                    for i in 0..n {
                        for j in 0..m {
                            let c = coeff(i, j);
                            for k in 0..dim {
                                d[i * dim + k] += c * (ad[i * dim + k] - bd[j * dim + k]);
                            }
                        }
                    }
                    Tensor::from_parts(av.shape().to_vec(), d)
                });
                emit(*b, &|| {
                    let mut d = vec![0.0; bd.len()];
                    for i in 0..n {
                        for j in 0..m {
                            let c = coeff(i, j);
                            for k in 0..dim {
                                d[j * dim + k] -= c * (ad[i * dim + k] - bd[j * dim + k]);
                            }
                        }
                    }
                    Tensor::from_parts(bv.shape().to_vec(), d)
                });
            }
            Op::Custom(inputs, backward) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let grads = backward(&vals, y, g);
                for (&v, gv) in inputs.iter().zip(grads) {
                    if self.needs(v) {
                        assert_eq!(gv.shape(), val(v).shape(), "custom adjoint has wrong shape");
                        out.push((v, gv));
                    }
                }
            }
        }
        out
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let d = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), d)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

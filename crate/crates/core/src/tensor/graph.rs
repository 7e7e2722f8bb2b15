use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{axis_split, resolve_axis, Real, Tensor};
use crate::error::{Error, Result};

/// Additive attention-mask value standing in for −∞.
pub const MASK_VALUE: f64 = -1e9;

/// `sqrt(2/π)` and the cubic coefficient of the tanh GELU approximation
/// `gelu(x) = x/2 · (1 + tanh(√(2/π) (x + 0.044715 x³)))`.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddBias(Var, Var),
    MulBias(Var, Var),
    MatMul { a: Var, b: Var, shared_rhs: bool, batch: usize, m: usize, k: usize, n: usize },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Slice { src: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Softmax(Var, usize),
    LayerNorm { src: Var, axis: usize, inv_std: Vec<T> },
    Relu(Var),
    /// Caches `tanh` of the inner polynomial for the backward pass.
    Gelu(Var, Vec<T>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation. One graph per forward/backward pass.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
    check_finite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn permute_data<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out, out_shape);
    }
    if rank == 0 {
        out.push(data[0]);
        return (out, out_shape);
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], src_strides[last]);
    loop {
        let mut o = offset;
        for _ in 0..inner_len {
            out.push(data[o]);
            o += inner_stride;
        }
        // Odometer over the outer output axes.
        let mut ax = last;
        loop {
            if ax == 0 {
                return (out, out_shape);
            }
            ax -= 1;
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

fn gelu_tanh<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    (c * (x + a * x * x * x)).tanh_fast()
}

/// Derivative of GELU at `x`, given `t = gelu_tanh(x)`.
fn gelu_grad<T: Real>(x: T, t: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Gradient buffer of `v`, allocated on first use; `None` when `v` is untracked.
fn grad_slot<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            check_finite: false,
        }
    }

    /// A graph that rejects any non-finite forward value.
    pub fn with_finite_checks() -> Self {
        Self { check_finite: true, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A tracked leaf (gradients are accumulated for it).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// An untracked leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass w.r.t. a tracked leaf. Untracked or
    /// unreached leaves report `None`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {op_name}")));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&mut self, op_name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(op_name, value, op, &[a, b])
    }

    fn unary(&mut self, op_name: &'static str, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let va = self.value(a);
        let value = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())?;
        self.push(op_name, value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary("add_scalar", a, Op::AddScalar(a), |x| x + s)
    }

    fn check_trailing(&self, op: &'static str, x: Var, b: Var) -> Result<usize> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs.is_empty() || bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(shape_err(op, format!("{bs:?} is not a trailing block of {xs:?}")));
        }
        Ok(self.value(b).numel())
    }

    /// `x + b`, with `b` broadcast over the leading axes of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let width = self.check_trailing("add_bias", x, b)?;
        let (vx, vb) = (self.value(x), self.value(b));
        let mut data = vx.data().to_vec();
        for row in data.chunks_exact_mut(width) {
            row.iter_mut().zip(vb.data()).for_each(|(r, &bb)| *r += bb);
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias(x, b), &[x, b])
    }

    /// `x ⊙ g`, with `g` broadcast over the leading axes of `x`.
    pub fn mul_bias(&mut self, x: Var, g: Var) -> Result<Var> {
        let width = self.check_trailing("mul_bias", x, g)?;
        let (vx, vg) = (self.value(x), self.value(g));
        let mut data = vx.data().to_vec();
        for row in data.chunks_exact_mut(width) {
            row.iter_mut().zip(vg.data()).for_each(|(r, &gg)| *r *= gg);
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("mul_bias", value, Op::MulBias(x, g), &[x, g])
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[..., M, K]`; `b` is either `[K, N]` (shared by every leading
    /// index of `a`) or `[..., K, N]` with the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || shape_err("matmul", format!("{sa:?} x {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(bad());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(bad());
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != *lead {
            return Err(bad());
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        if shared_rhs {
            gemm_nn(batch * m, k, n, va, vb, &mut out);
        } else {
            for i in 0..batch {
                gemm_nn(
                    m,
                    k,
                    n,
                    &va[i * m * k..(i + 1) * m * k],
                    &vb[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let value = Tensor::new(out_shape, out)?;
        self.push("matmul", value, Op::MatMul { a, b, shared_rhs, batch, m, k, n }, &[a, b])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{perm:?} is not a permutation of {} axes", shape.len())));
        }
        let (data, out_shape) = permute_data(self.value(a).data(), &shape, perm);
        let value = Tensor::new(out_shape, data)?;
        self.push("permute", value, Op::Permute(a, perm.to_vec()), &[a])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(shape_err("transpose", format!("rank {rank} < 2")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if shape.iter().product::<usize>() != va.numel() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", va.shape())));
        }
        let value = Tensor::new(shape.to_vec(), va.data().to_vec())?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: isize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let ax = resolve_axis("slice", &shape, axis)?;
        if start + len > shape[ax] {
            return Err(shape_err("slice", format!("{start}..{} out of range for axis {ax} of {shape:?}", start + len)));
        }
        let (outer, n, inner) = axis_split(&shape, ax);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[ax] = len;
        let value = Tensor::new(out_shape, data)?;
        self.push("slice", value, Op::Slice { src: a, axis: ax, start }, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: isize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat", "no inputs".into()));
        };
        let shape0 = self.shape(first).to_vec();
        let ax = resolve_axis("concat", &shape0, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == shape0.len()
                && s.iter().zip(&shape0).enumerate().all(|(i, (x, y))| i == ax || x == y);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {shape0:?} along axis {ax}")));
            }
            total += s[ax];
        }
        let (outer, _, inner) = axis_split(&shape0, ax);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[ax];
                data.extend_from_slice(&self.value(p).data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut out_shape = shape0;
        out_shape[ax] = total;
        let value = Tensor::new(out_shape, data)?;
        self.push("concat", value, Op::Concat { parts: parts.to_vec(), axis: ax }, parts)
    }

    fn reduce_axis(&mut self, op_name: &'static str, a: Var, axis: isize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let ax = resolve_axis(op_name, &shape, axis)?;
        let (outer, n, inner) = axis_split(&shape, ax);
        if mean && n == 0 {
            return Err(shape_err(op_name, format!("empty axis {ax} of {shape:?}")));
        }
        let src = self.value(a).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for i in 0..n {
                let row = &src[(o * n + i) * inner..(o * n + i + 1) * inner];
                dst.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
            }
            if mean {
                let inv = T::one() / T::from_f64(n as f64);
                dst.iter_mut().for_each(|d| *d *= inv);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(ax);
        let op = if mean { Op::MeanAxis(a, ax) } else { Op::SumAxis(a, ax) };
        self.push(op_name, Tensor::new(out_shape, data)?, op, &[a])
    }

    /// Sum along `axis`, removing it.
    pub fn reduce_sum(&mut self, a: Var, axis: isize) -> Result<Var> {
        self.reduce_axis("reduce_sum", a, axis, false)
    }

    /// Mean along `axis`, removing it.
    pub fn reduce_mean(&mut self, a: Var, axis: isize) -> Result<Var> {
        self.reduce_axis("reduce_mean", a, axis, true)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.numel() == 0 {
            return Err(shape_err("mean_all", "empty tensor".into()));
        }
        let s: T = va.data().iter().copied().sum::<T>() / T::from_f64(va.numel() as f64);
        self.push("mean_all", Tensor::scalar(s), Op::MeanAll(a), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: isize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let ax = resolve_axis("softmax", &shape, axis)?;
        let (outer, n, inner) = axis_split(&shape, ax);
        if n == 0 {
            return Err(shape_err("softmax", format!("empty axis {ax} of {shape:?}")));
        }
        let src = self.value(a).data();
        let mut data = vec![T::zero(); src.len()];
        if inner == 1 {
            for (row, out) in src.chunks_exact(n).zip(data.chunks_exact_mut(n)) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                out.iter_mut().zip(row).for_each(|(o, &x)| *o = (x - max).exp_fast());
                let inv = T::one() / out.iter().copied().sum::<T>();
                out.iter_mut().for_each(|o| *o *= inv);
            }
            return self.push("softmax", Tensor::new(shape, data)?, Op::Softmax(a, ax), &[a]);
        }
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| src[at(i)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for i in 0..n {
                    let e = (src[at(i)] - max).exp_fast();
                    data[at(i)] = e;
                    sum += e;
                }
                let inv = T::one() / sum;
                for i in 0..n {
                    data[at(i)] *= inv;
                }
            }
        }
        self.push("softmax", Tensor::new(shape, data)?, Op::Softmax(a, ax), &[a])
    }

    /// Normalizes to zero mean and unit variance along `axis` (no affine part).
    pub fn layer_norm(&mut self, a: Var, axis: isize, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let ax = resolve_axis("layer_norm", &shape, axis)?;
        let (outer, n, inner) = axis_split(&shape, ax);
        if n == 0 {
            return Err(shape_err("layer_norm", format!("empty axis {ax} of {shape:?}")));
        }
        let src = self.value(a).data();
        let mut data = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        let nf = T::from_f64(n as f64);
        let eps = T::from_f64(eps);
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let mean = (0..n).map(|i| src[at(i)]).sum::<T>() / nf;
                let var = (0..n).map(|i| (src[at(i)] - mean) * (src[at(i)] - mean)).sum::<T>() / nf;
                let r = T::one() / (var + eps).sqrt();
                for i in 0..n {
                    data[at(i)] = (src[at(i)] - mean) * r;
                }
                inv_std.push(r);
            }
        }
        self.push("layer_norm", Tensor::new(shape, data)?, Op::LayerNorm { src: a, axis: ax, inv_std }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let t: Vec<T> = va.data().iter().map(|&x| gelu_tanh(x)).collect();
        let half = T::from_f64(0.5);
        let data = va.data().iter().zip(&t).map(|(&x, &t)| half * x * (T::one() + t)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("gelu", value, Op::Gelu(a, t), &[a])
    }

    /// `x · W + b` with `W: [in, out]` and `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    /// `softmax(Q Kᵀ / √d + mask) V` over the last two axes of `[..., L, d]`
    /// inputs. With `causal`, query `i` sees keys `0..=i` only.
    pub fn scaled_dot_product_attention(&mut self, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() < 2 || sq != sk || sk != sv {
            return Err(shape_err("attention", format!("Q {sq:?}, K {sk:?}, V {sv:?}")));
        }
        let (len, d) = (sq[sq.len() - 2], sq[sq.len() - 1]);
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scores = self.scale(scores, T::from_f64(1.0 / libm::sqrt(d as f64)))?;
        let scores = if causal {
            let mask = self.constant(causal_mask(len));
            self.add_bias(scores, mask)?
        } else {
            scores
        };
        let weights = self.softmax(scores, -1)?;
        self.matmul(weights, v)
    }

    /// Accumulates `d loss / d node` for every tracked node reachable from
    /// `loss`. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph("backward already ran on this graph; record a new forward pass".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!("loss must be a scalar, got shape {:?}", self.shape(loss))));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        let Self { nodes, grads, .. } = self;
        for i in (0..=loss.0).rev() {
            if matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let out = &nodes[i].value;
            match &nodes[i].op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if let Some(ga) = grad_slot(nodes, grads, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
                    }
                    if let Some(gb) = grad_slot(nodes, grads, *b) {
                        gb.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(ga) = grad_slot(nodes, grads, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
                    }
                    if let Some(gb) = grad_slot(nodes, grads, *b) {
                        gb.iter_mut().zip(&g).for_each(|(x, &y)| *x -= y);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(ga) = grad_slot(nodes, grads, *a) {
                        ga.iter_mut().zip(&g).zip(vb).for_each(|((x, &y), &w)| *x += y * w);
                    }
                    if let Some(gb) = grad_slot(nodes, grads, *b) {
                        gb.iter_mut().zip(&g).zip(va).for_each(|((x, &y), &w)| *x += y * w);
                    }
                }
                Op::Scale(a, s) => {
                    if let Some(ga) = grad_slot(nodes, grads, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, &y)| *x += y * *s);
                    }
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    if let Some(ga) = grad_slot(nodes, grads, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
                    }
                }
                Op::AddBias(x, b) => {
                    let width = nodes[b.0].value.numel();
                    if let Some(gx) = grad_slot(nodes, grads, *x) {
                        gx.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
                    }
                    if let Some(gb) = grad_slot(nodes, grads, *b) {
                        for row in g.chunks_exact(width) {
                            gb.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                        }
                    }
                }
                Op::MulBias(x, gamma) => {
                    let width = nodes[gamma.0].value.numel();
                    let (vx, vg) = (nodes[x.0].value.data(), nodes[gamma.0].value.data());
                    if let Some(gx) = grad_slot(nodes, grads, *x) {
                        for (grow, drow) in gx.chunks_exact_mut(width).zip(g.chunks_exact(width)) {
                            grow.iter_mut().zip(drow).zip(vg).for_each(|((x, &d), &w)| *x += d * w);
                        }
                    }
                    if let Some(gg) = grad_slot(nodes, grads, *gamma) {
                        for (drow, xrow) in g.chunks_exact(width).zip(vx.chunks_exact(width)) {
                            gg.iter_mut().zip(drow).zip(xrow).for_each(|((x, &d), &v)| *x += d * v);
                        }
                    }
                }
                Op::MatMul { a, b, shared_rhs, batch, m, k, n } => {
                    let (batch, m, k, n) = (*batch, *m, *k, *n);
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(ga) = grad_slot(nodes, grads, *a) {
                        if *shared_rhs {
                            gemm_nt(batch * m, n, k, &g, vb, ga);
                        } else {
                            for i in 0..batch {
                                gemm_nt(
                                    m,
                                    n,
                                    k,
                                    &g[i * m * n..(i + 1) * m * n],
                                    &vb[i * k * n..(i + 1) * k * n],
                                    &mut ga[i * m * k..(i + 1) * m * k],
                                );
                            }
                        }
                    }
                    if let Some(gb) = grad_slot(nodes, grads, *b) {
                        if *shared_rhs {
                            gemm_tn(batch * m, k, n, va, &g, gb);
                        } else {
                            for i in 0..batch {
                                gemm_tn(
                                    m,
                                    k,
                                    n,
                                    &va[i * m * k..(i + 1) * m * k],
                                    &g[i * m * n..(i + 1) * m * n],
                                    &mut gb[i * k * n..(i + 1) * k * n],
                                );
                            }
                        }
                    }
                }
                Op::Permute(a, perm) => {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let (back, _) = permute_data(&g, out.shape(), &inverse);
                    if let Some(ga) = grad_slot(nodes, grads, *a) {
                        ga.iter_mut().zip(&back).for_each(|(x, &y)| *x += y);
                    }
                }
                Op::Slice { src, axis, start } => {
                    let src_shape = nodes[src.0].value.shape().to_vec();
                    let (outer, n, inner) = axis_split(&src_shape, *axis);
                    let len = out.shape()[*axis];
                    if let Some(gs) = grad_slot(nodes, grads, *src) {
                        for o in 0..outer {
                            let base = (o * n + start) * inner;
                            gs[base..base + len * inner]
                                .iter_mut()
                                .zip(&g[o * len * inner..(o + 1) * len * inner])
                                .for_each(|(x, &y)| *x += y);
                        }
                    }
                }
                Op::Concat { parts, axis } => {
                    let (outer, total, inner) = axis_split(out.shape(), *axis);
                    let mut offset = 0;
                    for p in parts {
                        let n = nodes[p.0].value.shape()[*axis];
                        if let Some(gp) = grad_slot(nodes, grads, *p) {
                            for o in 0..outer {
                                let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                                gp[o * n * inner..(o + 1) * n * inner]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(x, &y)| *x += y);
                            }
                        }
                        offset += n;
                    }
                }
                Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                    let src_shape = nodes[a.0].value.shape().to_vec();
                    let (outer, n, inner) = axis_split(&src_shape, *axis);
                    let factor = if matches!(nodes[i].op, Op::MeanAxis(..)) {
                        T::one() / T::from_f64(n as f64)
                    } else {
                        T::one()
                    };
                    if let Some(ga) = grad_slot(nodes, grads, *a) {
                        for o in 0..outer {
                            let src = &g[o * inner..(o + 1) * inner];
                            for r in 0..n {
                                ga[(o * n + r) * inner..(o * n + r + 1) * inner]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(x, &y)| *x += y * factor);
                            }
                        }
                    }
                }
                Op::SumAll(a) | Op::MeanAll(a) => {
                    let numel = nodes[a.0].value.numel();
                    let d = if matches!(nodes[i].op, Op::MeanAll(_)) {
                        g[0] / T::from_f64(numel as f64)
                    } else {
                        g[0]
                    };
                    if let Some(ga) = grad_slot(nodes, grads, *a) {
                        ga.iter_mut().for_each(|x| *x += d);
                    }
                }
                Op::Softmax(a, axis) => {
                    let (outer, n, inner) = axis_split(out.shape(), *axis);
                    let y = out.data();
                    if let Some(ga) = grad_slot(nodes, grads, *a) {
                        if inner == 1 {
                            for ((gr, yr), dr) in ga.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(g.chunks_exact(n)) {
                                let dot: T = yr.iter().zip(dr).map(|(&y, &d)| y * d).sum();
                                gr.iter_mut().zip(yr.iter().zip(dr)).for_each(|(x, (&y, &d))| *x += y * (d - dot));
                            }
                            continue;
                        }
                        for o in 0..outer {
                            for j in 0..inner {
                                let at = |r: usize| (o * n + r) * inner + j;
                                let dot: T = (0..n).map(|r| g[at(r)] * y[at(r)]).sum();
                                for r in 0..n {
                                    ga[at(r)] += y[at(r)] * (g[at(r)] - dot);
                                }
                            }
                        }
                    }
                }
                Op::LayerNorm { src, axis, inv_std } => {
                    let (outer, n, inner) = axis_split(out.shape(), *axis);
                    let y = out.data();
                    let nf = T::from_f64(n as f64);
                    if let Some(gs) = grad_slot(nodes, grads, *src) {
                        for o in 0..outer {
                            for j in 0..inner {
                                let at = |r: usize| (o * n + r) * inner + j;
                                let r_inv = inv_std[o * inner + j];
                                let sum_g: T = (0..n).map(|r| g[at(r)]).sum();
                                let sum_gy: T = (0..n).map(|r| g[at(r)] * y[at(r)]).sum();
                                for r in 0..n {
                                    gs[at(r)] += r_inv / nf * (nf * g[at(r)] - sum_g - y[at(r)] * sum_gy);
                                }
                            }
                        }
                    }
                }
                Op::Relu(a) => {
                    let va = nodes[a.0].value.data();
                    if let Some(ga) = grad_slot(nodes, grads, *a) {
                        ga.iter_mut()
                            .zip(&g)
                            .zip(va)
                            .for_each(|((x, &d), &v)| if v > T::zero() { *x += d });
                    }
                }
                Op::Gelu(a, t) => {
                    let va = nodes[a.0].value.data();
                    if let Some(ga) = grad_slot(nodes, grads, *a) {
                        ga.iter_mut()
                            .zip(&g)
                            .zip(va.iter().zip(t))
                            .for_each(|((x, &d), (&v, &t))| *x += d * gelu_grad(v, t));
                    }
                }
            }
        }
        Ok(())
    }
}

/// `[len, len]` additive mask: 0 on and below the diagonal, [`MASK_VALUE`] above.
pub fn causal_mask<T: Real>(len: usize) -> Tensor<T> {
    Tensor::from_fn([len, len], |i| {
        if i % len > i / len {
            T::from_f64(MASK_VALUE)
        } else {
            T::zero()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a = g.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let out = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(out).data(), g.value(a).data());
    }

    #[test]
    fn constant_softmax_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([5], 3.7f64));
        let s = g.softmax(x, 0).unwrap();
        assert!(g.value(s).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn empty_axes_are_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([2, 0]));
        assert!(g.softmax(x, 1).is_err());
        assert!(g.layer_norm(x, -1, 1e-5).is_err());
        assert!(g.reduce_mean(x, 1).is_err());
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        match g.matmul(a, b) {
            Err(Error::Shape { op, detail }) => {
                assert_eq!(op, "matmul");
                assert!(detail.contains("[2, 3]"));
            }
            other => panic!("{other:?}"),
        }
        let c = g.constant(Tensor::zeros([3]));
        assert!(g.add(a, c).is_err());
        assert!(g.add_bias(a, b).is_ok());
        let bad_bias = g.constant(Tensor::zeros([2]));
        assert!(g.add_bias(a, bad_bias).is_err());
        assert!(g.permute(a, &[0, 0]).is_err());
        assert!(g.slice(a, 1, 2, 2).is_err());
    }

    #[test]
    fn simple_gradients() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 2], &[1., -2., 3., 0.5]));
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);

        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1., -2., 3.]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2., -4., 6.]);
    }

    #[test]
    fn backward_contract() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        assert!(matches!(g.backward(x), Err(Error::Graph(_))));
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Graph(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let c = g.constant(t(&[2], &[3., 4.]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum_all(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3., 4.]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn permute_roundtrip_and_layout() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn([2, 3, 4], |i| i as f64));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // out[k, i, j] = in[i, j, k]
        let v = g.value(p).data();
        assert_eq!(v[(1 * 2 + 1) * 3 + 2], ((1 * 3 + 2) * 4 + 1) as f64);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }

    #[test]
    fn finite_checks() {
        let mut g = Graph::<f64>::with_finite_checks();
        let x = g.constant(t(&[1], &[f64::MAX]));
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn gelu_constants() {
        // gelu(1) with the tanh form = 0.8411919906082768
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[1.0, 0.0]));
        let y = g.gelu(x).unwrap();
        assert!((g.value(y).data()[0] - 0.841_191_990_608_276_8).abs() < 1e-15);
        assert_eq!(g.value(y).data()[1], 0.0);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new([1], vec![1.0f32]).unwrap());
        let y = g.gelu(x).unwrap();
        assert!((g.value(y).data()[0] - 0.841_191_99).abs() < 1e-6);
    }
}

//! Forward definitions of every differentiable operation, plus the backward
//! helpers dispatched from [`Graph::backward`].

use crate::conv::{conv3d_forward, ConvDims, ConvGeom};
use crate::error::{config_err, shape_err, Result};
use crate::gemm::{gemm, gemm_nt, gemm_tn};
use crate::graph::{zip_map, Activation, Graph, NormLayout, Op, ReduceOp, Var};
use crate::scalar::Scalar;
use crate::special;
use crate::tensor::{numel, strides, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Trilinear,
}

impl std::str::FromStr for UpsampleMode {
    type Err = crate::error::TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "trilinear" => Ok(Self::Trilinear),
            other => config_err("upsample", format!("unknown mode {other:?}")),
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let x2 = x * x;
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x2 * x);
    let t = u.tanh();
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x2);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

fn apply_activation<T: Scalar>(kind: Activation, x: T) -> T {
    match kind {
        Activation::Neg => -x,
        Activation::Exp => x.exp(),
        Activation::Ln => x.ln(),
        Activation::Softplus => softplus(x),
        Activation::Sigmoid => sigmoid(x),
        Activation::Relu => x.max(T::zero()),
        Activation::Gelu => gelu(x),
        Activation::Recip => x.recip(),
        Activation::Square => x * x,
        Activation::LnGamma => T::lit(special::ln_gamma(x.as_f64())),
        Activation::Digamma => T::lit(special::digamma(x.as_f64())),
    }
}

pub(crate) fn unary_backward<T: Scalar>(
    kind: Activation,
    x: &Tensor<T>,
    y: &Tensor<T>,
    g: &Tensor<T>,
) -> Tensor<T> {
    let data = g
        .data()
        .iter()
        .zip(x.data().iter().zip(y.data()))
        .map(|(&g, (&x, &y))| {
            g * match kind {
                Activation::Neg => -T::one(),
                Activation::Exp => y,
                Activation::Ln => x.recip(),
                Activation::Softplus => sigmoid(x),
                Activation::Sigmoid => y * (T::one() - y),
                // subgradient 0 at the kink
                Activation::Relu => {
                    if x > T::zero() {
                        T::one()
                    } else {
                        T::zero()
                    }
                }
                Activation::Gelu => gelu_grad(x),
                Activation::Recip => -y * y,
                Activation::Square => x + x,
                Activation::LnGamma => T::lit(special::digamma(x.as_f64())),
                Activation::Digamma => T::lit(special::trigamma(x.as_f64())),
            }
        })
        .collect();
    Tensor::from_parts(g.shape().to_vec(), data)
}

impl<T: Scalar> Graph<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(op, a, b)?;
        Ok(zip_map(self.value(a), self.value(b), f))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|a| a + c);
        self.push(v, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|a| a * c);
        self.push(v, Op::MulScalar(x, c))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let v = self.value(x).map(|a| apply_activation(kind, a));
        self.push(v, Op::Unary(x, kind))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Neg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Ln)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Recip)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Square)
    }

    pub fn ln_gamma(&mut self, x: Var) -> Var {
        self.activation(x, Activation::LnGamma)
    }

    pub fn digamma(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Digamma)
    }

    /// Clamps into `[lo, hi]`; the gradient passes only where the input lies inside.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let v = self.value(x).map(|a| a.max(lo).min(hi));
        self.push(v, Op::Clamp(x, lo, hi))
    }
}

// ---------------------------------------------------------------------------
// reductions and broadcasting

/// Iterates a row-major shape, yielding (flat input index, mapped offset)
/// where the offset uses `map_strides` per axis.
fn for_each_mapped(shape: &[usize], map_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let total = numel(shape);
    let mut coord = vec![0usize; rank];
    let mut off = 0usize;
    for i in 0..total {
        f(i, off);
        for a in (0..rank).rev() {
            coord[a] += 1;
            off += map_strides[a];
            if coord[a] < shape[a] {
                break;
            }
            off -= map_strides[a] * shape[a];
            coord[a] = 0;
        }
    }
}

/// Shape with reduced axes set to 1, and the strides mapping input coords into it.
fn reduced_layout(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let kept: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(a, &d)| if axes.contains(&a) { 1 } else { d })
        .collect();
    let ks = strides(&kept);
    let map = (0..shape.len())
        .map(|a| if axes.contains(&a) { 0 } else { ks[a] })
        .collect();
    (kept, map)
}

pub(crate) fn reduce_backward<T: Scalar>(
    op: ReduceOp,
    in_shape: &[usize],
    axes: &[usize],
    argmax: &[usize],
    g: &Tensor<T>,
) -> Tensor<T> {
    let mut out = vec![T::zero(); numel(in_shape)];
    match op {
        ReduceOp::Max => {
            for (o, &src) in argmax.iter().enumerate() {
                out[src] = g.data()[o];
            }
        }
        ReduceOp::Sum | ReduceOp::Mean => {
            let count: usize = axes.iter().map(|&a| in_shape[a]).product();
            let scale = if op == ReduceOp::Mean {
                T::one() / T::lit(count as f64)
            } else {
                T::one()
            };
            let (_, map) = reduced_layout(in_shape, axes);
            let gd = g.data();
            for_each_mapped(in_shape, &map, |i, o| out[i] = gd[o] * scale);
        }
    }
    Tensor::from_parts(in_shape.to_vec(), out)
}

/// Sums `g` down to `shape`, whose extents are either equal to g's or 1.
pub(crate) fn sum_to_shape<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let axes: Vec<usize> = (0..shape.len())
        .filter(|&a| shape[a] != g.shape()[a])
        .collect();
    let (kept, map) = reduced_layout(g.shape(), &axes);
    let mut out = vec![T::zero(); numel(&kept)];
    let gd = g.data();
    for_each_mapped(g.shape(), &map, |i, o| out[o] += gd[i]);
    Tensor::from_parts(kept, out)
}

impl<T: Scalar> Graph<T> {
    /// Reduces over `axes`. With `keepdim` the reduced extents stay as 1,
    /// otherwise they are removed (a full reduction yields shape `[1]`).
    pub fn reduce(&mut self, x: Var, op: ReduceOp, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return config_err("reduce", format!("duplicate axis in {axes:?}"));
        }
        if sorted.iter().any(|&a| a >= shape.len()) {
            return config_err("reduce", format!("axis out of range in {axes:?} for rank {}", shape.len()));
        }
        let (kept, map) = reduced_layout(&shape, &sorted);
        let n_out = numel(&kept);
        let xd = self.value(x).data();
        let mut argmax = Vec::new();
        let data = match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                // Neumaier-compensated accumulation
                let mut acc = vec![T::zero(); n_out];
                let mut comp = vec![T::zero(); n_out];
                for_each_mapped(&shape, &map, |i, o| {
                    let (s, v) = (acc[o], xd[i]);
                    let t = s + v;
                    comp[o] += if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
                    acc[o] = t;
                });
                acc.iter_mut().zip(&comp).for_each(|(a, c)| *a += *c);
                if op == ReduceOp::Mean {
                    let count: usize = sorted.iter().map(|&a| shape[a]).product();
                    let inv = T::one() / T::lit(count as f64);
                    acc.iter_mut().for_each(|v| *v *= inv);
                }
                acc
            }
            ReduceOp::Max => {
                let mut acc = vec![T::neg_infinity(); n_out];
                argmax = vec![usize::MAX; n_out];
                for_each_mapped(&shape, &map, |i, o| {
                    // first occurrence wins ties
                    if argmax[o] == usize::MAX || xd[i] > acc[o] {
                        acc[o] = xd[i];
                        argmax[o] = i;
                    }
                });
                acc
            }
        };
        let out_shape = if keepdim {
            kept
        } else {
            let s: Vec<usize> = shape
                .iter()
                .enumerate()
                .filter(|(a, _)| !sorted.contains(a))
                .map(|(_, &d)| d)
                .collect();
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Reduce {
                x,
                op,
                axes: sorted,
                argmax,
            },
        ))
    }

    pub fn sum(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(x, ReduceOp::Sum, axes, keepdim)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(x, ReduceOp::Mean, axes, keepdim)
    }

    pub fn max(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(x, ReduceOp::Max, axes, keepdim)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, ReduceOp::Sum, &axes, false)
            .expect("full reduction is always valid")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, ReduceOp::Mean, &axes, false)
            .expect("full reduction is always valid")
    }

    /// Explicit broadcast: every extent of `x` must equal the target's or be 1.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != shape.len() || xs.iter().zip(shape).any(|(&a, &b)| a != b && a != 1) {
            return shape_err("expand", &xs, shape);
        }
        if xs == shape {
            return Ok(x);
        }
        let st = strides(&xs);
        let map: Vec<usize> = (0..xs.len())
            .map(|a| if xs[a] == 1 { 0 } else { st[a] })
            .collect();
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); numel(shape)];
        for_each_mapped(shape, &map, |i, o| out[i] = xd[o]);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::Expand(x)))
    }
}

// ---------------------------------------------------------------------------
// shape manipulation

pub(crate) fn permute_data<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let xs = x.shape();
    let st = strides(xs);
    let out_shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
    let map: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
    let xd = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for_each_mapped(&out_shape, &map, |i, o| out[i] = xd[o]);
    Tensor::from_parts(out_shape, out)
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (numel(&shape[..axis]), numel(&shape[axis + 1..]))
}

pub(crate) fn narrow_data<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let xs = x.shape();
    let (outer, inner) = outer_inner(xs, axis);
    let full = xs[axis];
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = xs.to_vec();
    shape[axis] = len;
    Tensor::from_parts(shape, out)
}

pub(crate) fn narrow_backward<T: Scalar>(g: &Tensor<T>, in_shape: &[usize], axis: usize, start: usize) -> Tensor<T> {
    let (outer, inner) = outer_inner(in_shape, axis);
    let (full, len) = (in_shape[axis], g.shape()[axis]);
    let mut out = vec![T::zero(); numel(in_shape)];
    for o in 0..outer {
        let dst = (o * full + start) * inner;
        out[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_parts(in_shape.to_vec(), out)
}

impl<T: Scalar> Graph<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() {
            return shape_err("reshape", self.shape(x), shape);
        }
        let v = Tensor::from_parts(shape.to_vec(), self.value(x).data().to_vec());
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return config_err("permute", format!("{perm:?} is not a permutation of rank {rank}"));
        }
        let v = permute_data(self.value(x), perm);
        Ok(self.push(v, Op::Permute(x, perm.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return config_err("transpose", "rank must be >= 2");
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x);
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return config_err(
                "narrow",
                format!("range {start}..{} out of bounds for axis {axis} of {xs:?}", start + len),
            );
        }
        let v = narrow_data(self.value(x), axis, start, len);
        Ok(self.push(v, Op::Narrow { x, axis, start }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return config_err("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return config_err("concat", format!("axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len() && (0..s.len()).all(|a| a == axis || s[a] == base[a]);
            if !ok {
                return shape_err("concat", &base, s);
            }
            total += s[axis];
        }
        if parts.len() == 1 {
            return Ok(first);
        }
        let (outer, inner) = outer_inner(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// linear algebra

pub(crate) fn matmul_backward<T: Scalar>(g_: &Graph<T>, a: Var, b: Var, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
    let (m, k) = (g_.shape(a)[0], g_.shape(a)[1]);
    let n = g_.shape(b)[1];
    let mut out = Vec::with_capacity(2);
    if g_.requires_grad(a) {
        let mut ga = vec![T::zero(); m * k];
        gemm_nt(m, n, k, g.data(), g_.value(b).data(), &mut ga);
        out.push((a, Tensor::from_parts(vec![m, k], ga)));
    }
    if g_.requires_grad(b) {
        let mut gb = vec![T::zero(); k * n];
        gemm_tn(k, m, n, g_.value(a).data(), g.data(), &mut gb);
        out.push((b, Tensor::from_parts(vec![k, n], gb)));
    }
    out
}

pub(crate) fn bmm_backward<T: Scalar>(g_: &Graph<T>, a: Var, b: Var, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
    let (bs, m, k) = (g_.shape(a)[0], g_.shape(a)[1], g_.shape(a)[2]);
    let n = g_.shape(b)[2];
    let mut out = Vec::with_capacity(2);
    let (ad, bd, gd) = (g_.value(a).data(), g_.value(b).data(), g.data());
    if g_.requires_grad(a) {
        let mut ga = vec![T::zero(); bs * m * k];
        for i in 0..bs {
            gemm_nt(m, n, k, &gd[i * m * n..], &bd[i * k * n..], &mut ga[i * m * k..(i + 1) * m * k]);
        }
        out.push((a, Tensor::from_parts(vec![bs, m, k], ga)));
    }
    if g_.requires_grad(b) {
        let mut gb = vec![T::zero(); bs * k * n];
        for i in 0..bs {
            gemm_tn(k, m, n, &ad[i * m * k..], &gd[i * m * n..], &mut gb[i * k * n..(i + 1) * k * n]);
        }
        out.push((b, Tensor::from_parts(vec![bs, k, n], gb)));
    }
    out
}

pub(crate) fn bias_grad<T: Scalar>(g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let gs = g.shape();
    let (outer, inner) = outer_inner(gs, axis);
    let len = gs[axis];
    let mut out = vec![T::zero(); len];
    for o in 0..outer {
        for (c, acc) in out.iter_mut().enumerate() {
            let base = (o * len + c) * inner;
            *acc += g.data()[base..base + inner].iter().copied().sum::<T>();
        }
    }
    Tensor::from_parts(vec![len], out)
}

impl<T: Scalar> Graph<T> {
    /// `[m×k] · [k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), self.value(b).data(), &mut c);
        Ok(self.push(Tensor::from_parts(vec![m, n], c), Op::MatMul(a, b)))
    }

    /// Batched `[B×m×k] · [B×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return shape_err("bmm", sa, sb);
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut c = vec![T::zero(); bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(m, k, n, &ad[i * m * k..], &bd[i * k * n..], &mut c[i * m * n..(i + 1) * m * n]);
        }
        Ok(self.push(Tensor::from_parts(vec![bs, m, n], c), Op::BatchMatMul(a, b)))
    }

    /// Adds a 1-D `bias` along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias);
        if axis >= xs.len() || bs.len() != 1 || bs[0] != xs[axis] {
            return shape_err("add_bias", &xs, bs);
        }
        let (outer, inner) = outer_inner(&xs, axis);
        let len = xs[axis];
        let bd = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for o in 0..outer {
            for (c, &bv) in bd.iter().enumerate() {
                let base = (o * len + c) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v += bv);
            }
        }
        Ok(self.push(Tensor::from_parts(xs, out), Op::AddBias { x, bias, axis }))
    }

    /// `x: [N,C,D,H,W]`, `w: [C',C,kd,kh,kw]`, optional `bias: [C']`.
    pub fn conv3d(&mut self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let dims = ConvDims::resolve(self.shape(x), self.shape(w), geom)?;
        if let Some(b) = bias {
            if self.shape(b) != [dims.co] {
                return shape_err("conv3d bias", self.shape(b), &[dims.co]);
            }
        }
        let out = conv3d_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &dims,
        );
        Ok(self.push(
            Tensor::from_parts(dims.out_shape(), out),
            Op::Conv3d {
                x,
                w,
                b: bias,
                dims,
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// softmax, normalization, resampling

pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, inner) = outer_inner(y.shape(), axis);
    let n = y.shape()[axis];
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![T::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut dotv = T::zero();
            for k in 0..n {
                dotv += yd[base + k * inner] * gd[base + k * inner];
            }
            for k in 0..n {
                let idx = base + k * inner;
                out[idx] = yd[idx] * (gd[idx] - dotv);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

/// Per-axis linear interpolation table: (lower index, upper index, upper weight).
fn linear_table(extent: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..extent * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(extent - 1);
            let i1 = (i0 + 1).min(extent - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn upsample_apply<T: Scalar>(
    in_shape: &[usize],
    factor: usize,
    mode: UpsampleMode,
    mut f: impl FnMut(usize, usize, T),
) {
    let (nc, d, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3], in_shape[4]);
    let (od, oh, ow) = (d * factor, h * factor, w * factor);
    let tables = match mode {
        UpsampleMode::Nearest => {
            let t = |e: usize| (0..e * factor).map(|o| (o / factor, o / factor, 0.0)).collect::<Vec<_>>();
            [t(d), t(h), t(w)]
        }
        UpsampleMode::Trilinear => [
            linear_table(d, factor),
            linear_table(h, factor),
            linear_table(w, factor),
        ],
    };
    let one = 1.0;
    for c in 0..nc {
        let ib = c * d * h * w;
        let ob = c * od * oh * ow;
        for (z, &(z0, z1, wz)) in tables[0].iter().enumerate() {
            for (y, &(y0, y1, wy)) in tables[1].iter().enumerate() {
                for (x, &(x0, x1, wx)) in tables[2].iter().enumerate() {
                    let o = ob + (z * oh + y) * ow + x;
                    if mode == UpsampleMode::Nearest {
                        f(o, ib + (z0 * h + y0) * w + x0, T::one());
                        continue;
                    }
                    for (zi, zw) in [(z0, one - wz), (z1, wz)] {
                        for (yi, yw) in [(y0, one - wy), (y1, wy)] {
                            for (xi, xw) in [(x0, one - wx), (x1, wx)] {
                                let wt = zw * yw * xw;
                                if wt != 0.0 {
                                    f(o, ib + (zi * h + yi) * w + xi, T::lit(wt));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn upsample_backward<T: Scalar>(
    g: &Tensor<T>,
    in_shape: &[usize],
    factor: usize,
    mode: UpsampleMode,
) -> Tensor<T> {
    let mut out = vec![T::zero(); numel(in_shape)];
    let gd = g.data();
    upsample_apply(in_shape, factor, mode, |o, i, wt: T| out[i] += wt * gd[o]);
    Tensor::from_parts(in_shape.to_vec(), out)
}

pub(crate) fn norm_backward<T: Scalar>(
    graph: &Graph<T>,
    [x, gamma, beta]: [Var; 3],
    xhat: &[T],
    rstd: &[T],
    layout: NormLayout,
    g: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    let gd = g.data();
    let gam = graph.value(gamma).data();
    let pcount = gam.len();
    let mut ggamma = vec![T::zero(); pcount];
    let mut gbeta = vec![T::zero(); pcount];
    let mut gx = vec![T::zero(); gd.len()];
    // (group index, param index) for every element, as an iterator over contiguous runs.
    let runs: Vec<(usize, usize, usize, usize)> = match layout {
        NormLayout::Layer { width } => (0..gd.len() / width)
            .flat_map(|r| (0..width).map(move |c| (r, c, r * width + c, 1)))
            .collect(),
        NormLayout::Group { n, c, spatial, .. } => (0..n)
            .flat_map(|b| (0..c).map(move |ch| (b, ch, (b * c + ch) * spatial, spatial)))
            .collect(),
    };
    let group_of = |row: usize, ch: usize| -> usize {
        match layout {
            NormLayout::Layer { .. } => row,
            NormLayout::Group { c, groups, .. } => row * groups + ch / (c / groups),
        }
    };
    let ngroups = rstd.len();
    let mut sum_dy = vec![T::zero(); ngroups];
    let mut sum_dy_xhat = vec![T::zero(); ngroups];
    for &(row, ch, start, len) in &runs {
        let grp = group_of(row, ch);
        for i in start..start + len {
            let dy = gd[i] * gam[ch];
            sum_dy[grp] += dy;
            sum_dy_xhat[grp] += dy * xhat[i];
            ggamma[ch] += gd[i] * xhat[i];
            gbeta[ch] += gd[i];
        }
    }
    let group_size = T::lit((gd.len() / ngroups) as f64);
    for &(row, ch, start, len) in &runs {
        let grp = group_of(row, ch);
        let (m1, m2) = (sum_dy[grp] / group_size, sum_dy_xhat[grp] / group_size);
        for i in start..start + len {
            let dy = gd[i] * gam[ch];
            gx[i] = rstd[grp] * (dy - m1 - xhat[i] * m2);
        }
    }
    let mut out = Vec::with_capacity(3);
    if graph.requires_grad(x) {
        out.push((x, Tensor::from_parts(g.shape().to_vec(), gx)));
    }
    if graph.requires_grad(gamma) {
        out.push((gamma, Tensor::from_parts(vec![pcount], ggamma)));
    }
    if graph.requires_grad(beta) {
        out.push((beta, Tensor::from_parts(vec![pcount], gbeta)));
    }
    out
}

impl<T: Scalar> Graph<T> {
    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return config_err("softmax", format!("axis {axis} out of range for {xs:?}"));
        }
        let (outer, inner) = outer_inner(&xs, axis);
        let n = xs[axis];
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut m = T::neg_infinity();
                for k in 0..n {
                    m = m.max(xd[base + k * inner]);
                }
                let mut s = T::zero();
                for k in 0..n {
                    let e = (xd[base + k * inner] - m).exp();
                    out[base + k * inner] = e;
                    s += e;
                }
                let inv = T::one() / s;
                for k in 0..n {
                    out[base + k * inner] *= inv;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(xs, out), Op::Softmax { x, axis }))
    }

    /// Integer-factor upsampling of `[N,C,D,H,W]`; trilinear uses the
    /// half-pixel (align-corners-false) convention with edge clamping.
    pub fn upsample(&mut self, x: Var, factor: usize, mode: UpsampleMode) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return config_err("upsample", format!("expected rank-5 input, got {xs:?}"));
        }
        if factor == 0 {
            return config_err("upsample", "factor must be >= 1");
        }
        if factor == 1 {
            return Ok(x);
        }
        let out_shape = vec![xs[0], xs[1], xs[2] * factor, xs[3] * factor, xs[4] * factor];
        let mut out = vec![T::zero(); numel(&out_shape)];
        let xd = self.value(x).data();
        upsample_apply(&xs, factor, mode, |o, i, wt: T| out[o] += wt * xd[i]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Upsample { x, factor, mode },
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of that width.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let width = *xs.last().expect("rank >= 1");
        for p in [gamma, beta] {
            if self.shape(p) != [width] {
                return shape_err("layer_norm", &xs, self.shape(p));
            }
        }
        let rows = self.value(x).numel() / width;
        let groups: Vec<(usize, usize)> = (0..rows).map(|r| (r * width, width)).collect();
        let (xhat, rstd) = normalize(self.value(x).data(), &groups, eps);
        let out = affine(&xhat, self.value(gamma).data(), self.value(beta).data(), |i| i % width);
        Ok(self.push(
            Tensor::from_parts(xs, out),
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                layout: NormLayout::Layer { width },
            },
        ))
    }

    /// Group normalization of `[N,C,...]` with per-channel affine params.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return config_err("group_norm", format!("expected [N,C,...], got {xs:?}"));
        }
        let (n, c) = (xs[0], xs[1]);
        if groups == 0 || c % groups != 0 {
            return config_err("group_norm", format!("{c} channels not divisible into {groups} groups"));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return shape_err("group_norm", &xs, self.shape(p));
            }
        }
        let spatial = numel(&xs[2..]);
        let gsize = (c / groups) * spatial;
        let spans: Vec<(usize, usize)> = (0..n * groups).map(|g| (g * gsize, gsize)).collect();
        let (xhat, rstd) = normalize(self.value(x).data(), &spans, eps);
        let out = affine(&xhat, self.value(gamma).data(), self.value(beta).data(), |i| (i / spatial) % c);
        Ok(self.push(
            Tensor::from_parts(xs, out),
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                layout: NormLayout::Group {
                    n,
                    c,
                    spatial,
                    groups,
                },
            },
        ))
    }
}

fn normalize<T: Scalar>(x: &[T], spans: &[(usize, usize)], eps: f64) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(spans.len());
    for &(start, len) in spans {
        let s = &x[start..start + len];
        let inv_n = T::one() / T::lit(len as f64);
        let mean = s.iter().copied().sum::<T>() * inv_n;
        let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let r = T::one() / (var + T::lit(eps)).sqrt();
        for (o, &v) in xhat[start..start + len].iter_mut().zip(s) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    (xhat, rstd)
}

fn affine<T: Scalar>(xhat: &[T], gamma: &[T], beta: &[T], param_of: impl Fn(usize) -> usize) -> Vec<T> {
    xhat.iter()
        .enumerate()
        .map(|(i, &v)| {
            let p = param_of(i);
            v * gamma[p] + beta[p]
        })
        .collect()
}

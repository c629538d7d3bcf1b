//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] owns every intermediate value created during one forward pass.
//! Nodes are appended in evaluation order, so reverse insertion order is a
//! valid topological order for the backward sweep.

use crate::conv::{ConvDims, ConvGeom};
use crate::error::{Result, TensorError};
use crate::ops::UpsampleMode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Neg,
    Exp,
    Ln,
    Softplus,
    Sigmoid,
    Relu,
    Gelu,
    Recip,
    Square,
    LnGamma,
    Digamma,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Unary(Var, Activation),
    Clamp(Var, T, T),
    Reduce {
        x: Var,
        op: ReduceOp,
        axes: Vec<usize>,
        argmax: Vec<usize>,
    },
    Expand(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
        axis: usize,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    Upsample {
        x: Var,
        factor: usize,
        mode: UpsampleMode,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Normalized input, saved for backward.
        xhat: Vec<T>,
        /// One reciprocal std per normalization group.
        rstd: Vec<T>,
        layout: NormLayout,
    },
}

/// How a normalization op partitions its input.
#[derive(Clone, Copy, Debug)]
pub(crate) enum NormLayout {
    /// Rows of length `width` over the last axis; affine params per column.
    Layer { width: usize },
    /// `[N, C, S]` split into `groups` channel groups; affine params per channel.
    Group {
        n: usize,
        c: usize,
        spatial: usize,
        groups: usize,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::MatMul(a, b) | Op::BatchMatMul(a, b) => vec![*a, *b],
            Op::AddScalar(x)
            | Op::MulScalar(x, _)
            | Op::Unary(x, _)
            | Op::Clamp(x, _, _)
            | Op::Expand(x)
            | Op::Reshape(x)
            | Op::Permute(x, _) => vec![*x],
            Op::Reduce { x, .. }
            | Op::Narrow { x, .. }
            | Op::Upsample { x, .. }
            | Op::Softmax { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::AddBias { x, bias, .. } => vec![*x, *bias],
            Op::Conv3d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Norm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }

    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Unary(..) => "activation",
            Op::Clamp(..) => "clamp",
            Op::Reduce { .. } => "reduce",
            Op::Expand(..) => "expand",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "bmm",
            Op::AddBias { .. } => "add_bias",
            Op::Conv3d { .. } => "conv3d",
            Op::Upsample { .. } => "upsample",
            Op::Softmax { .. } => "softmax",
            Op::Norm { .. } => "norm",
        }
    }
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Recording of one forward evaluation plus accumulated leaf gradients.
///
/// Gradients of `requires_grad` leaves accumulate across repeated
/// [`backward`](Graph::backward) calls until [`zero_grad`](Graph::zero_grad).
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
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

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Gradient accumulated on a leaf by previous backward passes.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Back-propagates from a one-element `loss`.
    ///
    /// Every `requires_grad` leaf ends with a gradient (zeros when it is not
    /// connected to `loss`). Interior gradients are released as soon as they
    /// have been propagated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut work: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            work[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = work[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (v, gin) in self.backward_op(i, g) {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut work[v.0] {
                    Some(acc) => acc.add_assign(&gin),
                    slot => *slot = Some(gin),
                }
            }
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && g.is_none() {
                *g = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    /// Input-gradient contributions of node `i` given its output gradient.
    fn backward_op(&self, i: usize, g: Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let need = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g)],
            Op::Sub(a, b) => {
                let neg = g.map(|v| -v);
                vec![(*a, g), (*b, neg)]
            }
            Op::Mul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if need(a) {
                    out.push((*a, zip_map(&g, self.value(*b), |g, y| g * y)));
                }
                if need(b) {
                    out.push((*b, zip_map(&g, self.value(*a), |g, x| g * x)));
                }
                out
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut out = Vec::with_capacity(2);
                if need(a) {
                    out.push((*a, zip_map(&g, bv, |g, y| g / y)));
                }
                if need(b) {
                    let gb: Vec<T> = g
                        .data()
                        .iter()
                        .zip(av.data().iter().zip(bv.data()))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect();
                    out.push((*b, Tensor::from_parts(g.shape().to_vec(), gb)));
                }
                out
            }
            Op::AddScalar(x) => vec![(*x, g)],
            Op::MulScalar(x, c) => {
                let c = *c;
                vec![(*x, g.map(|v| v * c))]
            }
            Op::Unary(x, kind) => {
                vec![(*x, crate::ops::unary_backward(*kind, self.value(*x), &node.value, &g))]
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                vec![(
                    *x,
                    zip_map(&g, self.value(*x), |g, v| {
                        if v >= lo && v <= hi {
                            g
                        } else {
                            T::zero()
                        }
                    }),
                )]
            }
            Op::Reduce {
                x,
                op,
                axes,
                argmax,
            } => vec![(
                *x,
                crate::ops::reduce_backward(*op, self.shape(*x), axes, argmax, &g),
            )],
            Op::Expand(x) => vec![(*x, crate::ops::sum_to_shape(&g, self.shape(*x)))],
            Op::Reshape(x) => vec![(
                *x,
                Tensor::from_parts(self.shape(*x).to_vec(), g.into_data()),
            )],
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*x, crate::ops::permute_data(&g, &inv))]
            }
            Op::Narrow { x, axis, start } => vec![(
                *x,
                crate::ops::narrow_backward(&g, self.shape(*x), *axis, *start),
            )],
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if need(p) {
                        out.push((*p, crate::ops::narrow_data(&g, *axis, offset, len)));
                    }
                    offset += len;
                }
                out
            }
            Op::MatMul(a, b) => crate::ops::matmul_backward(self, *a, *b, &g),
            Op::BatchMatMul(a, b) => crate::ops::bmm_backward(self, *a, *b, &g),
            Op::AddBias { x, bias, axis } => {
                let mut out = Vec::with_capacity(2);
                if need(bias) {
                    out.push((*bias, crate::ops::bias_grad(&g, *axis)));
                }
                out.push((*x, g));
                out
            }
            Op::Conv3d { x, w, b, dims } => {
                let grads = crate::conv::conv3d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    dims,
                    [need(x), need(w), b.as_ref().is_some_and(need)],
                );
                let mut out = Vec::with_capacity(3);
                if let Some(gx) = grads.x {
                    out.push((*x, Tensor::from_parts(self.shape(*x).to_vec(), gx)));
                }
                if let Some(gw) = grads.w {
                    out.push((*w, Tensor::from_parts(self.shape(*w).to_vec(), gw)));
                }
                if let (Some(b), Some(gb)) = (b, grads.b) {
                    out.push((*b, Tensor::from_parts(self.shape(*b).to_vec(), gb)));
                }
                out
            }
            Op::Upsample { x, factor, mode } => vec![(
                *x,
                crate::ops::upsample_backward(&g, self.shape(*x), *factor, *mode),
            )],
            Op::Softmax { x, axis } => {
                vec![(*x, crate::ops::softmax_backward(&node.value, &g, *axis))]
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                layout,
            } => crate::ops::norm_backward(self, [*x, *gamma, *beta], xhat, rstd, *layout, &g),
        }
    }
}

/// Elementwise map over two equally shaped tensors.
pub(crate) fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

// Convenience for callers that build conv geometry inline.
impl<T: Scalar> Graph<T> {
    pub fn conv3d_same(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let k = self.shape(w)[2];
        self.conv3d(x, w, b, ConvGeom::same(k))
    }
}

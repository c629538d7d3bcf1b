//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! Every kernel is generic over [`Scalar`] (`f32` or `f64`). Layout is
//! row-major with `[N, C, D, H, W]` ordering for volumetric data.
//! Broadcasting is explicit: only [`Graph::add_bias`], scalar ops and
//! [`Graph::expand`] change extents implicitly.

mod conv;
pub mod error;
pub mod gemm;
pub mod gradcheck;
mod graph;
mod ops;
pub mod scalar;
pub mod special;
mod tensor;

pub use conv::ConvGeom;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradReport};
pub use graph::{Activation, Graph, ReduceOp, Var};
pub use ops::UpsampleMode;
pub use scalar::{DType, Scalar};
pub use tensor::{numel, strides, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;

impl<T: Scalar> Graph<T> {
    /// Copies the value of `x` into a new constant leaf; gradients stop here.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }
}

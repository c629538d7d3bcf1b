//! Vessel segmentation with a frozen-prefix ViT branch, a CNN branch,
//! variational fusion of the two bottlenecks and evidential refinement.
//!
//! The network and losses are generic over [`Scalar`]; training runs in
//! `f32` and gradient verification in `f64`.

pub mod checkpoint;
pub mod config;
pub mod cvf;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eur;
pub mod gradsuite;
pub mod infer;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod sliding;
pub mod train;
pub mod volume;

pub use config::{Ablation, ModelConfig, RunConfig};
pub use error::{Result, VfError};
pub use model::{ForwardOut, Model, Network};
pub use phantom::{generate_phantom, PhantomSpec};
pub use volume::{Grid, LabelVolume, Volume};
pub use vf_tensor::{Graph, Scalar, Tensor, Var};
pub use vf_tensor as tensor;

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;

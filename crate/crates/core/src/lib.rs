//! Depth map super-resolution.
//!
//! Super-resolution by a factor `r` is split into `r * r` novel-view sub-tasks, one small
//! residual conv unit per view, whose outputs are interleaved back into the high-resolution
//! grid. Stages cascade for large factors under deep supervision, an optional fusion unit
//! merges every stage's output, and a total-variation prior solved by IRLS refines the result.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix it.

pub mod conv;
pub mod dataio;
pub mod depth;
pub mod dfs;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod reorg;
pub mod resample;
pub mod scalar;
pub mod synth;
pub mod tensor;

pub use depth::DepthMap;
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type DepthMap64 = DepthMap<f64>;
pub type DepthMap32 = DepthMap<f32>;
pub type ConvLayer64 = conv::ConvLayer<f64>;
pub type CascadeModel64 = network::CascadeModel<f64>;
pub type CascadeModel32 = network::CascadeModel<f32>;
pub type ViewGrid64 = reorg::ViewGrid<f64>;
pub type IrlsState64 = dfs::IrlsState<f64>;

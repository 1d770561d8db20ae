//! Pseudo-depth aggregation and structured-noise fusion for RGB segmentation.

pub mod ablation;
pub mod autodiff;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod gradsuite;
pub mod init;
pub mod labels;
pub mod metrics;
pub mod pdam;
pub mod params;
pub mod scalar;
pub mod segnet;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamGroup, ParamStore};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;

//! Anatomy-guided fusion of region and global features for radiology
//! report generation, built on a small reverse-mode autodiff engine.

pub mod attention;
pub mod captioning;
pub mod data;
pub mod error;
pub mod fusion;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tensor::{Gradients, Tape, Tensor, TensorError, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Params32 = ParamStore<f32>;
pub type Params64 = ParamStore<f64>;
pub type Bundle32 = fusion::FeatureBundle<f32>;
pub type Bundle64 = fusion::FeatureBundle<f64>;

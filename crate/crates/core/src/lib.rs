//! Differentiable, adversarially trained mask generation for masked image
//! modeling, built on a small reverse-mode autodiff engine.
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix the element type to `f64`, the default for training
//! and the only type the gradient checks use. `train.precision = "f32"` runs
//! the pipeline in single precision.

pub mod adversarial;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod mae;
pub mod optim;
pub mod probe;
pub mod rng;
pub mod scalar;
pub mod sweep;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type Graph = autodiff::Graph<f64>;
pub type ParamStore = autodiff::ParamStore<f64>;

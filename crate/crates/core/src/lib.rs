//! Attentive knowledge tracing.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom pin the common instantiations.

pub mod attention;
pub mod data;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod synthetic;
pub mod training;

pub use error::{AktError, Result};
pub use scalar::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type ParamStore32 = numerics::ParamStore<f32>;
pub type ParamStore64 = numerics::ParamStore<f64>;
pub type AktModel32 = model::AktModel<f32>;
pub type AktModel64 = model::AktModel<f64>;

//! Semi-supervised segmentation with style-blended labeled data and
//! prototype cross-contrast between weak and strong views.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for callers that do not care.

pub mod ablation;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod contrast;
pub mod data;
pub mod error;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod scalar;
pub mod sdb;
pub mod seeding;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type SegModel64 = model::SegModel<f64>;
pub type SegModel32 = model::SegModel<f32>;
pub type TrainState64 = trainer::TrainState<f64>;
pub type TrainState32 = trainer::TrainState<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type PrototypeBank64 = contrast::PrototypeBank<f64>;

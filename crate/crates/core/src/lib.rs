//! Cross-domain self-supervised segmentation toolkit.

pub mod audit;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Backbone32 = model::Backbone<f32>;
pub type Backbone64 = model::Backbone<f64>;

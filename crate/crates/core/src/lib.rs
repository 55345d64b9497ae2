//! Multimodal tropical-cyclone forecasting.
//!
//! Statistical track features and reanalysis cubes are turned into
//! fixed-length inputs for gradient-boosted trees, which forecast 24-hour
//! intensity and displacement. Cube embeddings come either from a truncated
//! higher-order SVD or from a frozen CNN encoder with a GRU or Transformer
//! decoder. Forecasts can be combined by an ElasticNet meta-learner or a
//! simple consensus average, and scored with the usual verification metrics.

mod codec;
pub mod config;
pub mod error;
pub mod eval;
pub mod forecast;
pub mod gbt;
pub mod linear_ensemble;
pub mod matrix;
pub mod neural;
pub mod pipeline;
pub mod storm_data;
pub mod synth;
pub mod tensor_ops;

pub use error::{Error, Result};

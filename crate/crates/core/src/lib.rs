//! Globally-aware multiple instance classification of high-resolution
//! grayscale images: a saliency map over the whole image selects a few
//! high-resolution patches, an attention-pooled patch classifier reads them,
//! and both predictions are fused.

pub mod aggregation;
pub mod backbone;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod mil;
pub mod model;
pub mod nn;
pub mod roi;
pub mod synth;
pub mod training;
pub mod visualize;

pub use config::RunConfig;
pub use error::{GmicError, Result};
pub use model::Gmic;

//! Reverse-mode differentiable tensors with exactly the operator set a
//! saliency-map + multiple-instance image classifier needs.
//!
//! Computation is generic over [`Real`]: `f32` for training and inference,
//! `f64` for finite-difference gradient verification.

mod adam;
mod checkpoint;
mod conv;
mod error;
mod params;
mod real;
mod tape;
mod tensor;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use error::{Error, Result};
pub use params::{AdamMoments, Grads, ParamId, ParamStore};
pub use real::{Precision, Real};
pub use tape::{BatchNormMode, BatchStats, Tape, Var, BCE_CLAMP, BN_EPS, POW_GRAD_FLOOR};
pub use tensor::Tensor;

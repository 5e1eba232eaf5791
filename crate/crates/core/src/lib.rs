//! OCT choroid analysis: biomarker-regularized choroid segmentation, en-face projection,
//! vessel-shadow localization and adversarial shadow inpainting, with a synthetic phantom
//! that supplies exact ground truth for every stage.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix the
//! precision used for training and inference.

// `!(x > 0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bionet;
pub mod enface;
pub mod error;
pub mod imgproc;
pub mod metrics;
pub mod nn;
pub mod oct;
pub mod phantom;
pub mod seeds;
pub mod shadow;
pub mod training;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type OctVolumeF32 = oct::OctVolume<f32>;
pub type BScanF32 = oct::BScan<f32>;
pub type EnFaceF32 = oct::EnFaceImage<f32>;
pub type BoundaryF64 = oct::BoundaryCurve<f64>;

//! Feature-space adaptation engine built around prototype-anchored
//! alignment and uncertainty-aware contrastive refinement, plus a synthetic
//! Gaussian domain-shift benchmark for exercising it end to end.
//!
//! The crate is generic over the scalar type (`f32` or `f64`) through the
//! [`Scalar`] trait; the `*64` aliases below are the concrete types most
//! callers want.

pub mod adam;
pub mod bench;
pub mod checkpoint;
pub mod contrastive;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod metrics;
pub mod network;
pub mod parallel;
pub mod pfa;
pub mod prototypes;
pub mod rng;
pub mod scalar;
pub mod uncertainty;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision matrix.
pub type Matrix64 = linalg::Matrix<f64>;
/// Single-precision matrix.
pub type Matrix32 = linalg::Matrix<f32>;

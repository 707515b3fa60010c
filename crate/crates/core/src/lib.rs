//! Reduced-order state estimation from partial linear measurements.
//!
//! Full vector fields are reconstructed from Doppler-style voxel averages with
//! linear, affine, partitioned and data-driven PBDW estimators, on a synthetic
//! pulsatile bifurcating-channel manifold.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod error;
pub mod estimator;
pub mod hilbert;
pub mod manifold;
pub mod measurement;
pub mod reduced;

pub use error::{Error, Result};

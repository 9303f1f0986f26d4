//! Open-set test-time adaptation on a tiny BatchNorm MLP.
//!
//! Only the BatchNorm affine parameters adapt at test time. The objective
//! combines entropy minimization on samples judged in-distribution, angular
//! alignment of their features to class prototypes, and l1 suppression of
//! the features of samples judged out-of-distribution.

pub mod detectors;
pub mod error;
pub mod harness;
pub mod losses;
pub mod mathcore;
pub mod metrics;
pub mod model;
pub mod stream;

pub use error::{LabError, Result};

//! Motion-group-aware Gaussian trajectory forecasting.
//!
//! The crate covers the non-rendering core of a dynamic Gaussian scene
//! pipeline: blended SE(3) motion bases, motion-aware grouping of Gaussians,
//! group-wise rigid/non-rigid refinement, a small masked transformer
//! forecaster and point-tracking metrics, plus a synthetic scene generator
//! that provides ground truth for all of them.

pub mod error;
pub mod se3;
pub mod scene;
pub mod synth;
pub mod grouping;
pub mod rigidfit;
pub mod optim;
pub mod forecast;
pub mod metrics;
pub mod io;
pub mod pipeline;

pub use error::{Error, Result};

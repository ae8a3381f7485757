//! Forecasting the smooth continuation of a partially observed daily curve.
//!
//! A day's curve (arrival counts, workload, ...) is modeled as a random
//! element of a finite-dimensional B-spline space driven by a few latent
//! factors plus structured noise. Given historical curves and the beginning
//! of a new day, the library estimates the model, predicts the rest of the
//! day by the best linear unbiased predictor, wraps the prediction in
//! simultaneous confidence bands, and scores everything through a
//! reproducible evaluation protocol.
//!
//! Module map:
//! - [`spline`]: knot vectors, basis evaluation, knot insertion, restriction,
//!   Gram matrices, Lagrange weights.
//! - [`linalg`]: symmetric eigendecomposition, SVD pseudoinverse, and the
//!   low-rank gain kernel.
//! - [`estimate`]: per-curve regression splines and functional PCA.
//! - [`predict`]: segmenting a model at a cut point, the linear predictor and
//!   its ridge variant, smooth concatenation.
//! - [`bands`]: global/local simultaneous confidence bands and their
//!   cross-validated counterparts.
//! - [`harness`]: CSV ingestion, the evaluation protocol, metrics, reports.
//! - [`synth`]: seeded synthetic models, samplers, and brute-force oracles
//!   used by tests.

pub mod bands;
pub mod error;
pub mod estimate;
pub mod harness;
pub mod linalg;
pub mod predict;
mod quad;
pub mod spline;
pub mod synth;

pub use error::{Error, Result};

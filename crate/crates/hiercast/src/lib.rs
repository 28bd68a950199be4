//! Point-of-sale demand forecasting across many store locations.
//!
//! The crate is organized around a five-stage pipeline:
//!
//! 1. [`synthgen`] — synthetic transaction streams from an inhomogeneous
//!    renewal process with known two-way ground truth.
//! 2. [`ingest`] — transaction CSV parsing and fixed-width time binning.
//! 3. [`localfit`] — per-location-day log-quadratic fits on an orthonormal
//!    polynomial basis, producing the upper-level coefficient dataset.
//! 4. [`hier`] — two-way crossed random-effects model over the
//!    coefficients, sampled by conjugate Gibbs or Metropolis-within-Gibbs,
//!    with split R-hat / ESS diagnostics.
//! 5. [`eval`] — hold-out evaluation against a group-mean baseline, plus
//!    variance decomposition and plot-data emission.
//!
//! [`config`] and [`pipeline`] tie the stages together behind the CLI, and
//! every stage is reproducible bit for bit from a seed via per-purpose
//! ChaCha streams.

pub mod config;
pub mod error;
pub mod eval;
pub mod hier;
pub mod ingest;
pub mod localfit;
pub mod pipeline;
pub mod synthgen;
pub mod timegrid;

pub use error::{Error, Result};

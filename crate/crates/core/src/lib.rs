//! Bootstrap inference for the maximum of a standardized sum of independent
//! high-dimensional random vectors.
//!
//! The crate provides
//! - the max statistic, wild / empirical / nested double wild bootstrap tests
//!   ([`bootstrap`]),
//! - Gaussian-max analytics: rectangle integrals of normal density gradients,
//!   max CDF/quantile/density and diagnostics ([`gauss`]),
//! - coverage-expansion predictors for the bootstrap rejection rate and
//!   Cornish–Fisher corrected quantiles ([`edgeworth`]),
//! - data-generating processes for the simulation designs ([`dgp`]),
//! - Stein-kernel verification oracles for the weight laws ([`stein`]),
//! - a deterministic parallel Monte Carlo harness with CSV/JSON reporting and
//!   a CLI ([`harness`]).

pub mod bootstrap;
pub mod dgp;
pub mod edgeworth;
pub mod error;
pub mod gauss;
pub mod harness;
pub mod model;
pub mod numeric;
pub mod random;
pub mod stein;

pub use error::{Error, Result};

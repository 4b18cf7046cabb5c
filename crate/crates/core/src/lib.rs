//! High-dimensional mean and frequency estimation under local differential
//! privacy.
//!
//! Users perturb a random subset of `m` out of `d` dimensions with a bounded
//! (Piecewise, Square Wave) or unbounded (Laplace) mechanism; the collector
//! averages the reports. The [`framework`] module models the per-dimension
//! deviation of the aggregate as a Gaussian, and [`hdr4me`] uses that model
//! to re-calibrate the aggregate with L1 or L2 regularization.

pub mod collector;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod framework;
pub mod frequency;
pub mod hdr4me;
pub mod mechanisms;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};

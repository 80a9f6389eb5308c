//! Markov property testing for multivariate stationary time series.
//!
//! The test asks whether the one-step conditional law of a series depends on
//! more than the most recent observation. It works by fitting a forward and a
//! backward conditional generator (mixture density networks), Monte Carlo
//! estimating conditional characteristic functions from each, combining them
//! into a doubly robust cross-fitted max-type statistic, and calibrating the
//! rejection threshold with a Gaussian multiplier bootstrap. Applied
//! sequentially on lag-embedded copies of the series, the same test yields an
//! estimate of the Markov order.
//!
//! Layout:
//! - [`nn`]: feed-forward trunk with three parallel mixture heads, analytic
//!   gradients, Adam.
//! - [`mdn`]: univariate mixture density networks, factorized multivariate
//!   conditional models, logistic components for binary columns.
//! - [`series`]: the time-series container, CSV I/O, lag embedding,
//!   deseasonalization.
//! - [`engine`]: the test itself — chunking, generator fitting, statistic,
//!   covariance, bootstrap, order determination.
//! - [`sim`]: data-generating processes for benchmarks (VAR, threshold,
//!   multivariate ARCH, AR(1), white noise).
//! - [`bench`]: replication harness producing rejection-rate tables.

pub mod bench;
pub mod engine;
pub mod error;
pub mod mat;
pub mod mdn;
pub mod nn;
pub mod rngutil;
pub mod series;
pub mod sim;

pub use engine::{run_test, estimate_order, OrderReport, TestConfig, TestReport};
pub use error::{Error, Result};
pub use series::TimeSeries;

//! Configuration, file formats, orchestration and command-line layer of the
//! B-spline finite cell full-waveform inversion engine in `fcmfwi-core`.

// `!(x > 0.0)` is used on purpose: it rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod app;
pub mod config;
pub mod convergence;
pub mod error;
pub mod fwi;
pub mod io;
pub mod setup;

pub use error::{AppError, AppResult};

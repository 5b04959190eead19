//! Core numerics for full-waveform inversion of a density scaling field on an
//! embedded (finite cell) B-spline discretization of the scalar wave equation.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, configuration,
//! timing and the command line live in the `fcmfwi` companion crate.

#![cfg_attr(not(test), no_std)]
// `!(x > 0.0)` is used on purpose: it rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod adjoint;
pub mod assembly;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod material;
pub mod optimize;
pub mod sparse;
pub mod splines;

pub use error::{Error, Result};

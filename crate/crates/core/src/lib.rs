//! Jam-absorption driving laboratory for a single-lane freeway sag.
//!
//! Ground truth comes from an IDM+ microsimulation with a gradient effect.
//! A cell transmission model with an extended Kalman filter estimates the
//! traffic state and the fundamental-diagram parameters from loop-detector
//! windows. The estimate drives a shadow-trajectory prediction of the
//! absorbing end time, which the jam-absorption controller tracks.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assimilation;
pub mod control;
pub mod ctm;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod microsim;
pub mod prediction;
pub mod scenario;

pub use error::{Error, Result};

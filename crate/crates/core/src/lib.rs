//! Desk-scale differentiable Gaussian splatting with pluggable
//! densification policies: the average-gradient baseline, top-k positional
//! gradient growth, rendering-error guided growth and a budgeted variant.

// Validation uses `!(x > lo)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backward;
pub mod camera;
pub mod densify;
pub mod error;
pub mod gaussian;
pub mod img;
pub mod loss;
pub mod render;
pub mod scene;
pub mod train;

pub use error::{Error, Result};

//! Temporal BEV detection with historical object prediction on a synthetic
//! planar world.
// Config validation writes `!(x > 0.0)` so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod bevnet;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod heads;
pub mod hop;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod queryfusion;
pub mod synthworld;
pub mod train;

pub use error::{Error, Result};

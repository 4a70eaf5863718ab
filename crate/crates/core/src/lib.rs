//! Single-image ego-lane inference.
//!
//! A two-head evidential classifier counts lanes from the ego lane to the left
//! and right road boundaries. Its context vector is regularized to predict the
//! vanishing point and line, and drives a single-query attention over the
//! backbone feature map. Training data comes from a procedural road renderer
//! with exact labels.

pub mod augment;
pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod evidential;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod nn;
pub mod synth;
pub mod training;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};

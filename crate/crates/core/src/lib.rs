//! Respiratory event detection from a single effort-belt channel.

// Negated comparisons are how the validators reject NaN alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod evaluate;
pub mod neuralnet;
pub mod pipeline;
pub mod postprocess;
pub mod preprocess;
pub mod record_io;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};

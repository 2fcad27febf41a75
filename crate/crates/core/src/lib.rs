//! Domain adaptation of grayscale OCT B-scan volumes between two unpaired
//! imaging domains, and evaluation of the result through a frozen retina
//! segmenter.

// `!(x > 0.0)` style guards deliberately reject NaN along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod nn;

pub use error::{Error, Result};
pub mod checkpoint;
pub mod cli;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod noise;
pub mod segmenter;
pub mod trainer;

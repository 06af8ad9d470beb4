//! Region-customizable multichannel sound extraction.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod acoustic_sim;
pub mod autodiff;
pub mod baselines;
pub mod dsp;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod region_features;
pub mod spatial_features;
pub mod tensor_io;

pub use error::{Error, Result};

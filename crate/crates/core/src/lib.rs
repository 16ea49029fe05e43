//! Learned image compression tuned for a downstream vision task.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bitstream;
pub mod checkpoint;
pub mod codec;
pub mod coding;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod imageio;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod pipeline;
pub mod prob;
pub mod rans;
pub mod rng;
pub mod task;
pub mod train;

pub use error::{Error, Result};

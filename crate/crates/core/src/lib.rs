// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acoustics;
pub mod autograd;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod training;
pub mod signal;
pub mod wav;

pub use error::{Error, Result};

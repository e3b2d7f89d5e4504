// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod cost;
pub mod error;
pub mod evolve;
pub mod experiments;
pub mod gates;
pub mod linalg;
pub mod model;
pub mod noise;
pub mod optimize;
pub mod pulse;

pub use error::{Error, Result};

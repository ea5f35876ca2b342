#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attention;
pub mod cli;
pub mod dataset;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};

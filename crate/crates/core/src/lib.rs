// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod error;
pub mod grid;
pub mod model;
pub mod oracles;
pub mod seed;
pub mod sim;
pub mod train;

pub use error::{Error, Result};

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod grid;
pub mod linear;
pub mod boundary;
pub mod problem;
pub mod model;
pub mod reduction;
pub mod continuation;
mod svd;
pub mod oracle;
pub mod registry;
pub mod report;
pub mod cli;

pub use error::{Error, Result};

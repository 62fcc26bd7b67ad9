#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bounds;
pub mod characteristics;
pub mod cli;
pub mod collision;
pub mod config;
pub mod error;
pub mod model;
pub mod oracle;
pub mod solver;
pub mod steady;

pub use error::{Error, Result};

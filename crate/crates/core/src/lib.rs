#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod cli;
pub mod consistency;
pub mod error;
pub mod field;
pub mod master;
pub mod model;
pub mod numerics;
pub mod riccati;
pub mod simulate;
pub mod streams;

pub use error::{Error, Result};

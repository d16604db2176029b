#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datastore;
pub mod error;
pub mod harness;
pub mod modelcore;
pub mod netblocks;
pub mod numkernel;
pub mod stacksim;
pub mod stcodec;
pub mod trainer;
mod wire;

pub use error::{Error, FormatError, Result};

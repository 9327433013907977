#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ctmc;
pub mod error;
pub mod harness;
pub mod model;
pub mod objectives;
pub mod oracle;
pub mod path;
pub mod quad;
pub mod rng;
pub mod samplers;
pub mod util;

pub use error::{Error, Result};

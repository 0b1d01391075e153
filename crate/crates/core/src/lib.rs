// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod corpus;
pub mod dp;
pub mod error;
pub mod experiment;
pub mod fed;
pub mod model;
pub mod secagg;
pub mod seed;
pub mod text;

pub use error::{Error, Result};

// `!(x > 0.0)` rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregate;
pub mod curation;
pub mod error;
pub mod judges;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pairing;
pub mod session;

pub use error::{Error, Result};

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod bsde;
pub mod drivers;
pub mod error;
pub mod experiment;
pub mod laws;
pub mod meanfield;
pub mod mpp;
pub mod oracle;
pub mod reflected;

pub use error::{Error, Result};

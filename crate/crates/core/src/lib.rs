// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod bounds;
pub mod contractive;
pub mod error;
pub mod experiments;
pub mod jacobian;
pub mod tensor;

pub use error::{Error, Result};

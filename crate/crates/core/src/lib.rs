//! Decoder-only transformer inference in which selected layers retrieve
//! cached key/value memories with exact cosine top-k search and attend to them
//! together with the local context, plus the harnesses used to measure it.

// Range checks are written as `!(x > lo)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod error;
pub mod eval;
pub mod generation;
pub mod memory;
pub mod model;
pub mod scalar;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};

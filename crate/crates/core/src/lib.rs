//! Concept-level unlearning for contrastive image-text models over a
//! two-level class taxonomy.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod binfmt;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod optim;
pub mod scenario;
pub mod surgery;
pub mod taxonomy;
pub mod trainer;

pub use error::{Error, Result};

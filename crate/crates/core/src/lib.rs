//! Desk-scale federated learning simulator for multi-scale histopathology grading.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod config;
pub mod datagen;
pub mod error;
pub mod federation;
pub mod imaging;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod nn;

pub use error::{Error, Result};
pub use labels::{Grade, Magnification};

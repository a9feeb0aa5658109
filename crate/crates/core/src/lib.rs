//! Triadic-modulation transformer layers and their supporting models.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod classifier;
pub mod co4;
pub mod config;
pub mod error;
pub mod macs;
pub mod mod_laws;
pub mod nn;
pub mod par;
pub mod report;
pub mod rl;
pub mod spiking;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::Tensor;

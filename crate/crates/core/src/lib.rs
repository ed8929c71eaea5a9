//! Tape-based autodiff, models, attacks and training objectives for
//! adversarially robust unsupervised domain adaptation.

// `!(x >= 0.0)` style checks are used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod nn;
pub mod objectives;
pub mod rng;

pub use error::{Error, Result};

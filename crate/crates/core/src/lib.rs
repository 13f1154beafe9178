#![no_std]
// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
extern crate alloc;

pub mod error;
pub mod ctm;
pub mod data;
pub mod expfam;
pub mod glm;
pub mod gme;
pub mod likelihoods;
pub mod linalg;
pub mod optim;
pub mod pmf;
pub mod quadrature;
pub mod rng;
pub mod sgp;
pub mod special;
pub mod synth;

pub use error::{Error, Result};

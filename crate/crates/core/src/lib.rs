//! Model selection by simulated online experiments scored with a
//! Gaussian-process surrogate of immediate feedback.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acquisition;
pub mod aoe_loop;
pub mod baselines;
pub mod candidates;
pub mod encoding;
pub mod env;
pub mod error;
pub mod gp_exact;
pub mod harness;
pub mod kernels;
pub mod linalg;
pub mod metric;
pub mod ope;
pub mod optim;
pub mod policy;
pub mod quadrature;
pub mod seeds;
pub mod serial;
pub mod svgp;

pub use error::{Error, Result};

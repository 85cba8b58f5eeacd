//! Unpaired learning of stochastic degradations with a shared normalizing
//! flow and a Gaussian shift between the clean and degraded latent spaces.

// `!(x > 0.0)` rejects NaN on purpose; tape ops are fallible, so not `ops::Add`.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait, clippy::needless_range_loop)]

pub mod autodiff;
#[cfg(feature = "cli")]
pub mod cli;
pub mod conditioning;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gauss1d;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod params;
pub mod rng;
pub mod shift;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Grads, Tape, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;

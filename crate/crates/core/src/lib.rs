//! Entropy-decomposed VAE objective and a baseline VAE on a small
//! reverse-mode autodiff core, with synthetic benchmarks, GMM priors and
//! independent numerical checks.

pub mod autodiff;
pub mod check;
pub mod data;
pub mod error;
pub mod losses;
pub mod nets;
pub mod priors;
pub mod reproduce;
pub mod trainer;

pub use error::{Error, Result};

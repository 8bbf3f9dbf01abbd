//! Latent-space Bayesian optimization with a HiPPO space-consistency
//! regularized variational autoencoder.

pub mod acquisition;
pub mod benchmarks;
pub mod bo;
pub mod config;
pub mod error;
pub mod fig2;
pub mod gp;
pub mod hippo;
pub mod linalg;
pub mod pgm;
pub mod record;
pub mod report;
pub mod rng;
pub mod selftest;
pub mod tape;
pub mod vae;

pub use error::{Error, Result};
pub use linalg::Matrix;

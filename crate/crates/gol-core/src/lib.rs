//! Long-tail classification toolkit built around the Gumbel CDF activation.
//!
//! The crate provides:
//! - numerically stable activation kernels (sigmoid, softmax, Gumbel CDF)
//!   with score clipping ([`activation`]);
//! - per-class losses and gradients for those kernels, plus frequency-aware
//!   weighting (EQL-style deterministic weights and stochastic drop weights)
//!   and their composition into the Gumbel optimized loss ([`loss`]);
//! - classifier initialization that zeroes the total score gradient at the
//!   first step ([`init`]);
//! - annotation parsing, spatial object-distribution grids, synthetic
//!   long-tail dataset generation, and repeat-factor sampling ([`data`]);
//! - a deterministic SGD trainer with decoupled classifier retraining
//!   ([`trainer`]);
//! - KL divergence between grids, weight-norm balance, and model-predicted
//!   distribution grids ([`analysis`]);
//! - finite-difference gradient checking for every loss ([`gradcheck`]).

pub mod activation;
pub mod analysis;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod loss;
pub mod trainer;

pub use error::{Error, Result};

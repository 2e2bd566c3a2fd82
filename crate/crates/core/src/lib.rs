//! Sample reconstruction against federated learning protected by local
//! differential privacy.
//!
//! The crate builds a malicious global model whose prefix (a zero-gradient
//! convolution, an equal-weight separation layer with Laplace-quantile biases
//! and a metric layer) imprints every training sample of a victim into its
//! uploaded gradients, even after clipping and Gaussian perturbation. The
//! server-side pipeline in [`attack`] then estimates the noise scale, averages
//! repeated bias gradients, divides weight by bias gradients, aligns the
//! candidates with recovered metrics, refines them with [`optimize`] and
//! filters residual noise.
//!
//! [`flsim`] runs multi-user FedSGD rounds around the attack, and [`runner`]
//! ties everything into the experiments driven by the command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attack;
pub mod config;
pub mod data;
pub mod error;
pub mod flsim;
pub mod ldp;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod optimize;
pub mod runner;

#[cfg(test)]
mod fixtures;

pub use error::{Error, Result};

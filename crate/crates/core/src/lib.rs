//! Importance-weighted variational bounds with hierarchical proposals.
//!
//! The crate provides the ELBO, the importance weighted lower bound (IWLB),
//! the joint bound over proposals with tractable marginals (J-IWLB) and the
//! hierarchical bound (H-IWLB), where the `K` samples share a common latent
//! `z0` and the intractable marginals are replaced through an auxiliary
//! reverse model `r(z0 | zj)`. Gradients come from a small reverse-mode tape
//! ([`autodiff`]), either as plain reparameterized gradients or as doubly
//! reparameterized (DReG) estimates for the inference parameters.
//!
//! Modules:
//! - [`autodiff`]: the tape.
//! - [`densities`]: Gaussians, the conjugate oracle model, 2D targets, Bernoulli likelihood.
//! - [`proposals`]: hierarchical, Markov and independent proposals.
//! - [`bounds`]: the bounds, weighting schemes and gradient estimators.
//! - [`trainer`]: Adam, annealing, Polyak averaging, free bits and the training loop.
//! - [`diagnostics`]: weight statistics, SIR, divergences and CSV output.

pub mod autodiff;
pub mod bounds;
pub mod densities;
pub mod diagnostics;
mod error;
pub mod nn;
pub mod params;
pub mod proposals;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};

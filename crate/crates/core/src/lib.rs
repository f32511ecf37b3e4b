//! Deep Gaussian processes trained by doubly stochastic variational
//! inference.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] / [`autodiff`]: dense 64-bit tensors and a define-by-run
//!   reverse-mode tape with analytic Cholesky and triangular-solve adjoints.
//! - [`gauss`]: jittered Cholesky, Gaussian KL divergences, reparametrised
//!   sampling and Gaussian (variational) log-densities.
//! - [`kernels`]: stationary ARD kernels and mean functions.
//! - [`conditional`]: the sparse variational posterior conditional mapping
//!   new inputs to predictive Gaussian marginals given inducing-point state.
//! - [`layers`]: stackable Bayesian layers (GP, latent-variable, variational
//!   dense) plus the Gaussian likelihood loss.
//! - [`model`], [`optim`], [`train`]: sequential model composition, the ELBO
//!   objective, Adam, plateau learning-rate scheduling, `fit` / `predict` /
//!   `evaluate`.
//! - [`data`], [`config`], [`checkpoint`]: CSV ingestion with normalisation,
//!   declarative model configuration and bit-exact checkpointing.

pub mod autodiff;
pub mod checkpoint;
pub mod conditional;
pub mod config;
pub mod data;
pub mod error;
pub mod gauss;
pub mod init;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{check_gradients, GradCheckReport, ParamMap, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

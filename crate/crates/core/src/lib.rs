//! Building blocks for sequence autoencoders whose latent space is shaped by
//! planar normalizing flows with kernel-regularized Jacobians.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`tape`]: dense f64 tensors and a per-step reverse-mode
//!   autodiff tape;
//! - [`flows`]: planar flows, their invertibility projection, and exact
//!   rank-one log-determinants;
//! - [`rnf`]: cluster sets, the inverse-multiquadratic / Gaussian kernels,
//!   and the kernel-regularized log-determinant;
//! - [`geometry`]: the pull-back metric `G = J^T J`, curve functionals, and
//!   a gradient-descent geodesic solver;
//! - [`divergences`]: diagonal-Gaussian KL, an unbiased Gaussian-kernel MMD,
//!   and a Monte Carlo mutual-information estimator;
//! - [`nets`]: LSTM encoder/decoder, posterior heads with batch-norm, and
//!   the combined sequence model;
//! - [`objectives`]: ELBO variants, the MMD-penalized flow objective, and
//!   the annealing schedule;
//! - [`data`]: vocabulary, batching, a synthetic template grammar, and a
//!   swiss-roll sampler.
//!
//! With the default `parallel` feature the heavy inner loops run on rayon;
//! see [`par`] for the deterministic reduction scheme that keeps results
//! bit-identical either way.

pub mod data;
pub mod divergences;
pub mod error;
pub mod flows;
pub mod geometry;
pub mod nets;
pub mod objectives;
pub mod par;
pub mod rnf;
pub mod tape;
pub mod tensor;

pub use error::{CoreError, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

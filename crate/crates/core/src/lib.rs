//! Differential Gaussian process (DiffGP) core.
//!
//! Inputs are warped by a sparse-GP-parameterized stochastic differential
//! equation (integrated with Euler–Maruyama) before a sparse variational GP
//! regressor or classifier; everything is trained jointly by stochastic
//! variational inference. This crate holds the numerics: dense tensors with a
//! reverse-mode gradient tape, RBF-ARD and separable spatio-temporal kernels,
//! sparse GP conditionals and divergences, the variational SDE flow, the ELBO,
//! and the Adam training loop. It is `no_std` + `alloc`; IO, file formats and
//! the CLI live in the companion `diffgp` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod check;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod linalg;
pub mod math;
pub mod metrics;
pub mod model;
pub mod optimizer;
pub mod rng;
pub mod sdeflow;
pub mod svgp;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

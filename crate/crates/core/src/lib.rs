//! Selective state-space scan with temporal-retention (Adaptor-T) and
//! multi-scale spatial (Adaptor-S) adaptors for vision Mamba layers.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`matd`], [`rng`]: dense tensors, the MATD dump format and
//!   the SplitMix64 generator.
//! - [`ssm`]: selective parameters, discretization and recurrence solvers.
//! - [`routes`]: 2D ↔ 1D scan routes.
//! - [`adaptor_t`], [`adaptor_s`]: the two adaptor modules.
//! - [`grad`]: tape-based reverse-mode differentiation, finite-difference
//!   checking and optimizers.
//! - [`model`]: the vision-Mamba block, insertion forms and the toy backbone.
//! - [`harness`]: synthetic data, training, fine-tuning, benchmarks and
//!   ablations behind the `mamba-adaptor` CLI.

pub mod adaptor_s;
pub mod adaptor_t;
pub mod error;
pub mod grad;
pub mod harness;
pub mod matd;
pub mod model;
pub mod rng;
pub mod routes;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Precision, Tensor};

//! Semantically targeted adversarial training and mistake-severity evaluation.
//!
//! The crate is organised bottom-up:
//!
//! - [`taxonomy`]: class hierarchies, path similarity and semantic target sets.
//! - [`data`]: CIFAR-100 binary parsing, synthetic hierarchical datasets, augmentation.
//! - [`model`]: the differentiable classifier interface, DeskNet, loss and optimizer.
//! - [`attack`]: L2 projected gradient descent, untargeted and targeted.
//! - [`objectives`]: standard, adversarial and semantically targeted training recipes.
//! - [`corruption`]: natural corruption kernels and precomputed corruption sets.
//! - [`metrics`]: mistake-severity reports and the evaluation sweeps.
//! - [`runner`]: configuration, orchestration, persistence and charts for the CLI.

pub mod attack;
pub mod corruption;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
mod numfmt;
pub mod objectives;
pub mod rng;
pub mod runner;
pub mod taxonomy;

pub use error::{Error, Result};

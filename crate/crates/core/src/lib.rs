//! Locally adaptive activation functions (global, layer-wise and neuron-wise
//! trainable slopes) with the slope-recovery loss term, physics-informed
//! objectives, and a laboratory for the implicit conditioning matrices that
//! adaptive slopes induce on plain gradient descent.
//!
//! Module map:
//!
//! - [`autodiff`]: scalar reverse-mode tape with nested differentiation.
//! - [`network`]: dense networks under the four activation regimes.
//! - [`batch`]: batched forward/backward over input-derivative channels,
//!   used on the training hot path and cross-checked against the tape.
//! - [`objective`]: data, residual, slope-recovery and cross-entropy terms.
//! - [`optimize`]: gradient descent variants, Armijo search, Adam, training loop.
//! - [`dynamics`]: locality and conditioning matrices, step equivalence,
//!   gradient identities, Hessians and condition numbers.
//! - [`problems`]: dataset generators, PDE residual operators and presets.
//! - [`verify`]: randomized sweeps of the gradient and identity checks.
//! - [`config`], [`report`], [`cli`]: command-line orchestration and outputs.

pub mod autodiff;
pub mod batch;
pub mod cli;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod network;
pub mod objective;
pub mod optimize;
pub mod problems;
pub mod report;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};

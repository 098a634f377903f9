//! DIVINE: a disentangled audio-visual variational network for joint
//! diagnosis and severity estimation from precomputed embedding sequences.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: matrices, layers with analytic backward passes, losses,
//!   Adam and a finite-difference gradient oracle.
//! * [`data`]: the embedding container format, JSON manifests, subject-wise
//!   fold planning and a synthetic generator with known latent factors.
//! * [`model`]: the DIVINE graph and the baseline architectures.
//! * [`train`]: training with early stopping, metrics, cross-validation,
//!   ablation suites and linear disentanglement probes.

pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};

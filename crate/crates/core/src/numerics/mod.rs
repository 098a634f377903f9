//! Deterministic 64-bit numerical building blocks.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod matrix;
pub mod params;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use layers::{
    dense_forward, maxpool1d, maxpool1d_backward, sigmoid, softmax, softmax_rows, Activation, BatchNorm, Conv1d,
    Dense,
};
pub use loss::{cross_entropy, cross_entropy_batch, gaussian_kl, reparameterize};
pub use matrix::{Matrix, Sequence};
pub use params::{Params, Slot, SlotMut};

//! The DIVINE graph, its baselines and checkpoints.

pub mod baselines;
pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod divine;
pub mod loss;
pub mod network;
pub mod refiner;

pub use baselines::{CnnNet, Evaluation, FlatFusion, Heads, Mlp, MlpNet, Source};
pub use batch::Batch;
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointHeader};
pub use config::{CycleMode, Modality, ModelConfig, Objective, TokenWeightMode};
pub use divine::{Branch, BranchNoise, Divine, ForwardMode, ForwardTrace, Noise};
pub use loss::{total_loss, LossBreakdown};
pub use network::{AnyNetwork, Architecture, BnStats, TrainStep};
pub use refiner::{Refiner, RefinerTrace};

//! Embedding containers, manifests, subject-wise folds and synthetic data.

pub mod container;
pub mod folds;
pub mod manifest;
pub mod synth;

pub use container::{read_container, write_container};
pub use folds::{leakage_scan, subject_kfold, FoldPlan, Split};
pub use manifest::{load_dataset, ClipRecord, Dataset, Dims, EmbeddingClip, Manifest, SeverityLevel, TaskTag};
pub use synth::{read_factor_table, synth_generate, write_factor_table, FactorRow, SyntheticData, SyntheticSpec};

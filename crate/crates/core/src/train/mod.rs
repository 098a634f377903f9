//! Training, metrics, cross-validation, ablation suites and probes.

pub mod ablation;
pub mod config;
pub mod cv;
pub mod metrics;
pub mod probe;
pub mod trainer;

pub use ablation::{render_table, rows_for, run_ablation, write_comparison_csv, AblationReport, ComparisonRow, Suite, CSV_HEADER};
pub use config::TrainConfig;
pub use cv::{cross_validate, evaluate_clips, model_config_for, run_fold, run_rng, CvOptions, ExperimentRecord, RunResult, TrainedRun};
pub use metrics::{aggregate, compute_metrics, render_confusion, summarize, AggregateMetrics, MetricsReport, Summary, SEVERITY_NORMALIZATION};
pub use trainer::{predict, train, EarlyStopping, EpochRecord, StopDecision, TrainOutcome, EVAL_CHUNK};
pub use probe::{class_probe, disentanglement_probe, extract_latents, r2_probe, LatentFeatures, ProbeReport, RidgeProbe, PROBE_RIDGE};

//! Subject-wise cross-validation over seeds and fold rotations.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::metrics::{aggregate, compute_metrics, AggregateMetrics, MetricsReport, SEVERITY_NORMALIZATION};
use super::trainer::{predict, train, EpochRecord};
use crate::data::{leakage_scan, subject_kfold, Dataset, EmbeddingClip, FoldPlan, Split};
use crate::error::{Error, Result};
use crate::model::{AnyNetwork, Architecture, LossBreakdown, Modality, ModelConfig};

/// Which runs to perform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub k: usize,
    pub seeds: Vec<u64>,
    /// Test-fold rotations to run; `None` runs all `k`.
    pub folds: Option<Vec<usize>>,
    /// Concurrent training runs.
    pub jobs: usize,
    /// Evaluation modes on the test split.
    pub modes: Vec<Modality>,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            k: 5,
            seeds: vec![0],
            folds: None,
            jobs: 1,
            modes: Modality::ALL.to_vec(),
        }
    }
}

/// Outcome of one (seed, fold) training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub test_fold: usize,
    pub val_fold: usize,
    pub train_clips: usize,
    pub val_clips: usize,
    pub test_clips: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub initial_train_loss: f64,
    /// Keyed by evaluation mode name.
    pub metrics: BTreeMap<String, MetricsReport>,
    pub test_losses: BTreeMap<String, LossBreakdown>,
    pub wall_clock_secs: f64,
}

/// Self-contained description and results of a cross-validation experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub variant: String,
    pub architecture: Architecture,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub options: CvOptions,
    pub fold_plans: Vec<FoldPlan>,
    pub class_labels: Vec<String>,
    pub severity_scores: Vec<f64>,
    pub normalization: String,
    pub runs: Vec<RunResult>,
    /// Mean ± std over all runs, keyed by evaluation mode name.
    pub aggregate: BTreeMap<String, AggregateMetrics>,
    pub wall_clock_secs: f64,
}

impl ExperimentRecord {
    /// Recomputes `aggregate` from the stored per-run metrics.
    pub fn recompute_aggregate(&self) -> Result<BTreeMap<String, AggregateMetrics>> {
        aggregate_runs(&self.runs)
    }
}

fn aggregate_runs(runs: &[RunResult]) -> Result<BTreeMap<String, AggregateMetrics>> {
    let mut by_mode: BTreeMap<String, Vec<&MetricsReport>> = BTreeMap::new();
    for r in runs {
        for (mode, m) in &r.metrics {
            by_mode.entry(mode.clone()).or_default().push(m);
        }
    }
    by_mode.into_iter().map(|(k, v)| Ok((k, aggregate(&v)?))).collect()
}

/// Model dimensions taken from the dataset, everything else from `base`.
pub fn model_config_for(dataset: &Dataset, base: &ModelConfig) -> ModelConfig {
    ModelConfig {
        d_v: dataset.manifest.dims.d_v,
        d_a: dataset.manifest.dims.d_a,
        n_classes: dataset.manifest.num_classes(),
        n_severity: dataset.manifest.num_severity_levels(),
        ..base.clone()
    }
}

/// Per-run generator: the seed selects the key, the fold selects the stream.
pub fn run_rng(seed: u64, fold: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fold as u64 + 1);
    rng
}

/// Scores `net` on `clips` under one evaluation mode.
pub fn evaluate_clips(
    net: &AnyNetwork,
    clips: &[&EmbeddingClip],
    modality: Modality,
    level_scores: &[f64],
) -> Result<(MetricsReport, LossBreakdown)> {
    let e = predict(net, clips, modality)?;
    let labels: Vec<usize> = clips.iter().map(|c| c.diagnosis).collect();
    let truth: Vec<f64> = clips
        .iter()
        .map(|c| c.severity_score.unwrap_or(level_scores[c.severity_level]))
        .collect();
    let m = compute_metrics(&e.cls_probs, &labels, &e.sev_probs, &truth, level_scores)?;
    Ok((m, e.losses))
}

/// A finished run together with its trained parameters.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub result: RunResult,
    pub network: AnyNetwork,
    pub split: Split,
}

/// Trains and tests one rotation of one seed.
pub fn run_fold(
    dataset: &Dataset,
    plan: &FoldPlan,
    test_fold: usize,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    modes: &[Modality],
) -> Result<TrainedRun> {
    let start = Instant::now();
    let split = plan.split(&dataset.clips, test_fold)?;
    let leaked = leakage_scan(&dataset.clips, &split);
    if !leaked.is_empty() {
        return Err(Error::Invariant(format!("subjects leak across splits: {leaked:?}")));
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| &dataset.clips[i]).collect::<Vec<_>>();
    let (tr, va, te) = (pick(&split.train), pick(&split.val), pick(&split.test));
    let mut rng = run_rng(plan.seed, test_fold);
    let net = AnyNetwork::new(train_cfg.resolved_architecture(), model_cfg, train_cfg.objective(), &mut rng)?;
    let outcome = train(net, &tr, &va, train_cfg, &mut rng)?;
    let level_scores = dataset.manifest.severity_scores();
    let mut metrics = BTreeMap::new();
    let mut test_losses = BTreeMap::new();
    for &mode in modes {
        if !outcome.network.supports(mode) {
            continue;
        }
        let (m, l) = evaluate_clips(&outcome.network, &te, mode, &level_scores)?;
        metrics.insert(mode.name().to_string(), m);
        test_losses.insert(mode.name().to_string(), l);
    }
    Ok(TrainedRun {
        result: RunResult {
            seed: plan.seed,
            test_fold,
            val_fold: split.val_fold,
            train_clips: tr.len(),
            val_clips: va.len(),
            test_clips: te.len(),
            epochs: outcome.epochs,
            best_epoch: outcome.best_epoch,
            best_val_loss: outcome.best_val_loss,
            initial_train_loss: outcome.initial_train_loss,
            metrics,
            test_losses,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
        network: outcome.network,
        split,
    })
}

/// Runs every requested (seed, fold) pair, `jobs` at a time, and aggregates.
pub fn cross_validate(
    dataset: &Dataset,
    variant: &str,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    options: &CvOptions,
) -> Result<(ExperimentRecord, Vec<TrainedRun>)> {
    let start = Instant::now();
    model_cfg.validate()?;
    train_cfg.validate()?;
    if options.seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let plans = options
        .seeds
        .iter()
        .map(|&s| subject_kfold(&dataset.clips, options.k, s))
        .collect::<Result<Vec<_>>>()?;
    let folds: Vec<usize> = options.folds.clone().unwrap_or_else(|| (0..options.k).collect());
    if let Some(&bad) = folds.iter().find(|&&f| f >= options.k) {
        return Err(Error::Config(format!("fold {bad} out of range for k={}", options.k)));
    }
    let jobs: Vec<(usize, usize)> = (0..plans.len()).flat_map(|p| folds.iter().map(move |&f| (p, f))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<TrainedRun>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(p, f)| run_fold(dataset, &plans[p], f, model_cfg, train_cfg, &options.modes))
            .collect()
    });
    let mut runs = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for ((p, f), r) in jobs.iter().zip(outcomes) {
        match r {
            Ok(run) => runs.push(run),
            Err(e) => failures.push(format!("seed {} fold {f}: {e}", plans[*p].seed)),
        }
    }
    if !failures.is_empty() {
        return Err(Error::RunsFailed(failures));
    }
    let results: Vec<RunResult> = runs.iter().map(|r| r.result.clone()).collect();
    let record = ExperimentRecord {
        variant: variant.to_string(),
        architecture: train_cfg.resolved_architecture(),
        model_config: model_cfg.clone(),
        train_config: train_cfg.clone(),
        options: options.clone(),
        fold_plans: plans,
        class_labels: dataset.manifest.diagnosis_labels.clone(),
        severity_scores: dataset.manifest.severity_scores(),
        normalization: SEVERITY_NORMALIZATION.to_string(),
        aggregate: aggregate_runs(&results)?,
        runs: results,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((record, runs))
}

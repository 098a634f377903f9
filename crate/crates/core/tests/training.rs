//! Training loop, cross-validation, ablation and probe behavior on small data.

use divine::data::{leakage_scan, subject_kfold, synth_generate, Dataset, EmbeddingClip, SyntheticData, SyntheticSpec};
use divine::model::{AnyNetwork, Architecture, ModelConfig, Modality};
use divine::numerics::Params;
use divine::train::{
    cross_validate, model_config_for, predict, run_ablation, run_rng, summarize, train, CvOptions, Suite,
    TrainConfig,
};
use divine::Error;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_data(seed: u64) -> SyntheticData {
    synth_generate(&SyntheticSpec {
        n_subjects: 10,
        clips_per_subject: 6,
        d_shared0: 3,
        d_priv0_video: 2,
        d_priv0_audio: 2,
        d_v: 8,
        d_a: 8,
        t_video: (6, 9),
        t_audio: (6, 9),
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn small_model(ds: &Dataset) -> ModelConfig {
    model_config_for(ds, &ModelConfig::tiny(2, 2))
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

fn split_clips(ds: &Dataset, seed: u64) -> (Vec<&EmbeddingClip>, Vec<&EmbeddingClip>) {
    let plan = subject_kfold(&ds.clips, 5, seed).unwrap();
    let split = plan.split(&ds.clips, 0).unwrap();
    let pick = |idx: &[usize]| idx.iter().map(|&i| &ds.clips[i]).collect::<Vec<_>>();
    (pick(&split.train), pick(&split.val))
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = small_data(1);
    let ds = &data.dataset;
    let (tr, va) = split_clips(ds, 1);
    for arch in [Architecture::Divine, Architecture::Flat, Architecture::Concat] {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = AnyNetwork::new(arch, &small_model(ds), quick(3).objective(), &mut rng).unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            patience: 10,
            ..quick(3)
        };
        let out = train(net.clone(), &tr, &va, &cfg, &mut rng).unwrap();
        assert_eq!(out.epochs.len(), 3);
        for (a, b) in net.slots().iter().zip(out.network.slots().iter()) {
            if a.trainable {
                let bits = |d: &[f64]| d.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a.data), bits(b.data), "{} moved", a.name);
            }
        }
    }
}

#[test]
fn training_reduces_the_loss_on_the_default_spec() {
    for seed in 0..5 {
        let data = synth_generate(&SyntheticSpec {
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let ds = &data.dataset;
        let (tr, va) = split_clips(ds, seed);
        let mut rng = run_rng(seed, 0);
        let cfg = quick(3);
        let model = model_config_for(ds, &ModelConfig::new(1, 1, 2, 2));
        let net = AnyNetwork::new(Architecture::Divine, &model, cfg.objective(), &mut rng).unwrap();
        let out = train(net, &tr, &va, &cfg, &mut rng).unwrap();
        let last = out.epochs.last().unwrap().train.total;
        assert!(last < out.initial_train_loss, "seed {seed}: {last} vs {}", out.initial_train_loss);
    }
}

#[test]
fn early_stopping_returns_the_best_snapshot() {
    let data = small_data(2);
    let ds = &data.dataset;
    let (tr, va) = split_clips(ds, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = TrainConfig { patience: 2, ..quick(12) };
    let net = AnyNetwork::new(Architecture::Divine, &small_model(ds), cfg.objective(), &mut rng).unwrap();
    let out = train(net, &tr, &va, &cfg, &mut rng).unwrap();
    let best = out.epochs.iter().map(|e| e.val.total).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_val_loss, best);
    let replay = predict(&out.network, &va, Modality::Both).unwrap().losses.total;
    assert_eq!(replay.to_bits(), best.to_bits());
    assert!(out.epochs.iter().all(|e| e.val.total >= replay));
}

#[test]
fn empty_split_is_a_configuration_error() {
    let data = small_data(3);
    let ds = &data.dataset;
    let (tr, _) = split_clips(ds, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = AnyNetwork::new(Architecture::Divine, &small_model(ds), quick(1).objective(), &mut rng).unwrap();
    assert!(matches!(train(net, &tr, &[], &quick(1), &mut rng), Err(Error::Config(_))));
}

#[test]
fn cross_validation_runs_every_fold_and_is_deterministic() {
    let data = small_data(4);
    let ds = &data.dataset;
    let opts = CvOptions {
        k: 5,
        seeds: vec![3],
        jobs: 2,
        ..CvOptions::default()
    };
    let run = || cross_validate(ds, "full", &small_model(ds), &quick(2), &opts).unwrap().0;
    let (a, b) = (run(), run());
    assert_eq!(a.runs.len(), 5);
    let strip = |r: &divine::train::ExperimentRecord| {
        let mut r = r.clone();
        r.wall_clock_secs = 0.0;
        r.runs.iter_mut().for_each(|x| x.wall_clock_secs = 0.0);
        serde_json::to_string(&r).unwrap()
    };
    assert_eq!(strip(&a), strip(&b));

    // Stored aggregates are reproducible from the per-run values.
    for (mode, agg) in &a.aggregate {
        let acc: Vec<f64> = a.runs.iter().map(|r| r.metrics[mode].accuracy).collect();
        let s = summarize(&acc);
        assert!((s.mean - agg.accuracy.mean).abs() < 1e-12);
        assert!((s.std - agg.accuracy.std).abs() < 1e-12);
    }
    assert_eq!(a.recompute_aggregate().unwrap(), a.aggregate);
    assert_eq!(a.aggregate.len(), 3);
}

#[test]
fn fold_plans_ignore_clip_order_and_never_leak() {
    let data = small_data(5);
    let mut clips = data.dataset.clips.clone();
    let plan = subject_kfold(&clips, 5, 11).unwrap();
    clips.shuffle(&mut ChaCha8Rng::seed_from_u64(99));
    assert_eq!(subject_kfold(&clips, 5, 11).unwrap(), plan);
    for f in 0..5 {
        let split = plan.split(&clips, f).unwrap();
        assert!(leakage_scan(&clips, &split).is_empty());
        assert_eq!(split.train.len() + split.val.len() + split.test.len(), clips.len());
    }
}

#[test]
fn regularization_suite_has_four_rows() {
    let data = small_data(6);
    let ds = &data.dataset;
    let opts = CvOptions {
        k: 3,
        folds: Some(vec![0]),
        ..CvOptions::default()
    };
    let report = run_ablation(ds, &small_model(ds), &quick(1), Suite::Regularization, &opts).unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["full", "no_cycle", "no_sparse", "no_token"]);
    assert_eq!(report.records.len(), 4);
    let modal = run_ablation(ds, &small_model(ds), &quick(1), Suite::Modalities, &opts).unwrap();
    assert_eq!(modal.rows.len(), 3);
    assert_eq!(modal.records.len(), 1);
}

#[test]
fn probes_require_a_factor_table() {
    let data = small_data(7);
    let ds = &data.dataset;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = AnyNetwork::new(Architecture::Divine, &small_model(ds), quick(1).objective(), &mut rng).unwrap();
    let err = divine::train::disentanglement_probe(&net, ds, None, 0).unwrap_err();
    assert!(matches!(err, Error::Unsupported(_)));
    let report = divine::train::disentanglement_probe(&net, ds, Some(&data.factors), 0).unwrap();
    assert_eq!(report.train_clips + report.test_clips, ds.len());
    let flat = AnyNetwork::new(Architecture::Flat, &small_model(ds), quick(1).objective(), &mut rng).unwrap();
    assert!(divine::train::disentanglement_probe(&flat, ds, Some(&data.factors), 0).is_err());
}

//! Command-line front end: synthesize data, train, evaluate, ablate, report.

mod settings;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use divine::data::{load_dataset, synth_generate, write_factor_table, Dataset, EmbeddingClip, SyntheticSpec};
use divine::model::{load_checkpoint, save_checkpoint, AnyNetwork, CycleMode, Modality, ModelConfig};
use divine::train::{
    aggregate, evaluate_clips, model_config_for, render_confusion, render_table, rows_for, run_ablation,
    write_comparison_csv, ComparisonRow, CvOptions, ExperimentRecord, MetricsReport, Suite, TrainConfig,
};

use settings::{echo, Settings};

#[derive(Parser, Debug)]
#[command(name = "divine", version, about = "Audio-visual diagnosis and severity models on embedding sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with known latent factors.
    Synth(SynthArgs),
    /// Subject-wise cross-validation; writes a record, metrics and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset or a stored test split.
    Eval(EvalArgs),
    /// Run an ablation or baseline suite.
    Ablate(AblateArgs),
    /// Merge experiment records into one aggregate table.
    Report(ReportArgs),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Flat `key=value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Generator or training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Concurrent training runs.
    #[arg(long)]
    jobs: Option<usize>,
    /// Extra `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn settings(&self) -> Result<Settings> {
        let mut s = match &self.config {
            Some(p) => Settings::load(p)?,
            None => Settings::default(),
        };
        for pair in &self.set {
            s.set_pair(pair)?;
        }
        if let Some(v) = self.seed {
            s.set("seed", v);
        }
        if let Some(v) = &self.out {
            s.set("out", v.display());
        }
        if let Some(v) = self.jobs {
            s.set("jobs", v);
        }
        Ok(s)
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    n_subjects: Option<usize>,
    #[arg(long)]
    clips_per_subject: Option<usize>,
    #[arg(long)]
    n_classes: Option<usize>,
    /// Distance between class means of the shared factor.
    #[arg(long)]
    separation: Option<f64>,
    /// Standard deviation of the per-step observation noise.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct ModelFlags {
    /// Drop the cycle-consistency term.
    #[arg(long)]
    no_cycle: bool,
    /// Replace the gates by 1 and drop the sparsity term.
    #[arg(long)]
    no_sparse: bool,
    /// Drop the token term.
    #[arg(long)]
    no_token: bool,
    /// Flat fusion of the pooled embeddings, no latent split.
    #[arg(long)]
    flat: bool,
    /// Skip the window-level VAE.
    #[arg(long)]
    single_level: bool,
    /// literal|flat
    #[arg(long)]
    token_weight_mode: Option<String>,
    /// asymmetric|symmetric
    #[arg(long)]
    cycle: Option<String>,
    /// Refuse audio-only inference without an audio-to-video decoder.
    #[arg(long)]
    strict: bool,
    /// both|video|audio
    #[arg(long)]
    modality: Option<String>,
    /// divine, single_level, flat, fcn_video, fcn_audio, cnn_video, cnn_audio, concat
    #[arg(long)]
    architecture: Option<String>,
}

impl ModelFlags {
    fn apply(&self, s: &mut Settings) {
        for (on, key) in [
            (self.no_cycle, "no_cycle"),
            (self.no_sparse, "no_sparse"),
            (self.no_token, "no_token"),
            (self.flat, "flat"),
            (self.single_level, "single_level"),
            (self.strict, "strict"),
        ] {
            if on {
                s.set(key, true);
            }
        }
        for (v, key) in [
            (&self.token_weight_mode, "token_weight_mode"),
            (&self.cycle, "cycle"),
            (&self.modality, "modality"),
            (&self.architecture, "architecture"),
        ] {
            if let Some(v) = v {
                s.set(key, v);
            }
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    flags: ModelFlags,
    /// Dataset manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of folds.
    #[arg(long)]
    k: Option<usize>,
    /// Comma-separated seeds; defaults to `--seed`.
    #[arg(long)]
    seeds: Option<String>,
    /// Comma-separated test folds to run; defaults to all.
    #[arg(long)]
    folds: Option<String>,
    #[arg(long)]
    max_epochs: Option<usize>,
}

impl TrainArgs {
    fn settings(&self) -> Result<Settings> {
        let mut s = self.common.settings()?;
        self.flags.apply(&mut s);
        if let Some(v) = &self.data {
            s.set("data", v.display());
        }
        for (v, key) in [(&self.seeds, "seeds"), (&self.folds, "folds")] {
            if let Some(v) = v {
                s.set(key, v);
            }
        }
        if let Some(v) = self.k {
            s.set("k", v);
        }
        if let Some(v) = self.max_epochs {
            s.set("max_epochs", v);
        }
        Ok(s)
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    flags: ModelFlags,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Split file written next to a checkpoint; restricts evaluation to its test clips.
    #[arg(long)]
    split: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// modalities|regularization|disentanglement|baselines
    #[arg(long)]
    suite: Option<String>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Experiment record JSON files.
    #[arg(required = true)]
    records: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Test clips of one training run, by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SplitFile {
    seed: u64,
    test_fold: usize,
    val_fold: usize,
    test_clip_ids: Vec<String>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Report(a) => cmd_report(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}

fn render_echo(sections: &[(&str, Vec<(String, String)>)]) -> String {
    let mut out = String::from("# effective configuration\n");
    for (name, lines) in sections {
        out.push_str(&format!("# [{name}]\n"));
        for (k, v) in lines {
            out.push_str(&format!("{k}={v}\n"));
        }
    }
    out
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut s = args.common.settings()?;
    for (v, key) in [
        (args.n_subjects, "n_subjects"),
        (args.clips_per_subject, "clips_per_subject"),
        (args.n_classes, "n_classes"),
    ] {
        if let Some(v) = v {
            s.set(key, v);
        }
    }
    for (v, key) in [(args.separation, "separation"), (args.noise, "noise")] {
        if let Some(v) = v {
            s.set(key, v);
        }
    }
    let out = PathBuf::from(s.take("out").context("`--out` is required")?);
    let spec: SyntheticSpec = s.apply(&SyntheticSpec::default())?;
    s.ensure_consumed("synth")?;
    spec.validate().context("invalid synthetic spec")?;

    let data = synth_generate(&spec)?;
    create_dir(&out)?;
    let manifest = data.dataset.save(&out)?;
    write_factor_table(&data.factors, out.join("factors.csv"))?;
    write_file(&out.join("config.txt"), render_echo(&[("synth", echo(&spec)?)]))?;

    let ds = &data.dataset;
    println!("wrote {}", manifest.display());
    println!("clips: {}  subjects: {}", ds.len(), ds.subjects().len());
    for (label, n) in ds.manifest.diagnosis_labels.iter().zip(ds.class_counts()) {
        println!("  {label}: {n}");
    }
    Ok(())
}

/// Everything a training-style command needs.
struct TrainSetup {
    data_path: PathBuf,
    dataset: Dataset,
    model: ModelConfig,
    train: TrainConfig,
    options: CvOptions,
    out: PathBuf,
}

const DATASET_DIMS: [&str; 4] = ["d_v", "d_a", "n_classes", "n_severity"];

fn train_setup(mut s: Settings) -> Result<(TrainSetup, Settings)> {
    for key in DATASET_DIMS {
        if s.contains(key) {
            bail!("`{key}` is taken from the dataset manifest and cannot be set");
        }
    }
    let data_path = PathBuf::from(s.take("data").context("`--data` (manifest path) is required")?);
    let out = PathBuf::from(s.take("out").context("`--out` is required")?);
    let k = s.take_parsed("k")?.unwrap_or(5);
    let jobs = s.take_parsed("jobs")?.unwrap_or(1);
    let seeds: Option<Vec<u64>> = s.take_list("seeds")?;
    let folds: Option<Vec<usize>> = s.take_list("folds")?;
    let train: TrainConfig = s.apply(&TrainConfig::default())?;
    train.validate()?;
    let dataset = load_dataset(&data_path)?;
    let base: ModelConfig = s.apply(&ModelConfig::new(1, 1, 2, 2))?;
    let model = model_config_for(&dataset, &base);
    model.validate()?;
    let options = CvOptions {
        k,
        seeds: seeds.unwrap_or_else(|| vec![train.seed]),
        folds,
        jobs,
        modes: Modality::ALL.to_vec(),
    };
    Ok((
        TrainSetup {
            data_path,
            dataset,
            model,
            train,
            options,
            out,
        },
        s,
    ))
}

fn setup_echo(t: &TrainSetup, extra: &[(String, String)]) -> Result<String> {
    let mut run = vec![
        ("data".to_string(), t.data_path.display().to_string()),
        ("out".to_string(), t.out.display().to_string()),
        ("k".to_string(), t.options.k.to_string()),
        ("jobs".to_string(), t.options.jobs.to_string()),
        (
            "seeds".to_string(),
            t.options.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
        ),
    ];
    if let Some(f) = &t.options.folds {
        run.push(("folds".into(), f.iter().map(usize::to_string).collect::<Vec<_>>().join(",")));
    }
    run.extend_from_slice(extra);
    let model: Vec<(String, String)> = echo(&t.model)?
        .into_iter()
        .map(|(k, v)| if DATASET_DIMS.contains(&k.as_str()) { (format!("# {k}"), v) } else { (k, v) })
        .collect();
    Ok(render_echo(&[("run", run), ("train", echo(&t.train)?), ("model", model)]))
}

fn metric_rows(record: &ExperimentRecord) -> Result<Vec<ComparisonRow>> {
    let modes: Vec<Modality> = Modality::ALL
        .into_iter()
        .filter(|m| record.aggregate.contains_key(m.name()))
        .collect();
    Ok(rows_for(record, &modes)?)
}

fn runs_csv(record: &ExperimentRecord) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["seed", "test_fold", "mode", "A", "F1", "M", "R", "epochs", "best_epoch"])?;
    let f = |v: f64| format!("{v:.4}");
    let o = |v: Option<f64>| v.map(f).unwrap_or_else(|| "NA".into());
    for r in &record.runs {
        for (mode, m) in &r.metrics {
            w.write_record([
                r.seed.to_string(),
                r.test_fold.to_string(),
                mode.clone(),
                f(m.accuracy),
                f(m.macro_f1),
                o(m.mae),
                o(m.rmse),
                r.epochs.len().to_string(),
                r.best_epoch.to_string(),
            ])?;
        }
    }
    Ok(w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)
}

fn confusion_text(labels: &[String], by_mode: &BTreeMap<String, Vec<Vec<usize>>>) -> String {
    by_mode
        .iter()
        .map(|(mode, c)| format!("[{mode}]\n{}", render_confusion(c, labels)))
        .collect::<Vec<_>>()
        .join("\n")
}

fn write_record_outputs(dir: &Path, record: &ExperimentRecord) -> Result<Vec<ComparisonRow>> {
    let rows = metric_rows(record)?;
    write_json(&dir.join("record.json"), record)?;
    let mut csv = Vec::new();
    write_comparison_csv(&mut csv, &rows)?;
    write_file(&dir.join("metrics.csv"), csv)?;
    write_file(&dir.join("runs.csv"), runs_csv(record)?)?;
    let confusion = record
        .aggregate
        .iter()
        .map(|(m, a)| (m.clone(), a.confusion.clone()))
        .collect();
    write_file(&dir.join("confusion.txt"), confusion_text(&record.class_labels, &confusion))?;
    Ok(rows)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (t, s) = train_setup(args.settings()?)?;
    s.ensure_consumed("train")?;
    create_dir(&t.out)?;
    write_file(&t.out.join("config.txt"), setup_echo(&t, &[])?)?;
    let variant = t.train.resolved_architecture().name();
    let (record, runs) = divine::train::cross_validate(&t.dataset, variant, &t.model, &t.train, &t.options)?;

    let ckpt_dir = t.out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    for run in &runs {
        let stem = format!("seed{}_fold{}", run.result.seed, run.result.test_fold);
        save_checkpoint(&ckpt_dir.join(format!("{stem}.ckpt")), &run.network, &t.model)?;
        let split = SplitFile {
            seed: run.result.seed,
            test_fold: run.split.test_fold,
            val_fold: run.split.val_fold,
            test_clip_ids: run.split.test.iter().map(|&i| t.dataset.clips[i].clip_id.clone()).collect(),
        };
        write_json(&ckpt_dir.join(format!("{stem}.split.json")), &split)?;
    }
    let rows = write_record_outputs(&t.out, &record)?;
    print!("{}", render_table(&rows));
    println!("{} runs, wrote {}", record.runs.len(), t.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut s = args.common.settings()?;
    args.flags.apply(&mut s);
    if let Some(p) = &args.checkpoint {
        s.set("checkpoint", p.display());
    }
    if let Some(p) = &args.data {
        s.set("data", p.display());
    }
    if let Some(p) = &args.split {
        s.set("split", p.display());
    }
    let ckpt = PathBuf::from(s.take("checkpoint").context("`--checkpoint` is required")?);
    let data_path = PathBuf::from(s.take("data").context("`--data` (manifest path) is required")?);
    let split_path = s.take("split").map(PathBuf::from);
    let out = s.take("out").map(PathBuf::from);
    let modality: Modality = s.take_parsed("modality")?.unwrap_or(Modality::Both);
    let strict: bool = s.take_parsed("strict")?.unwrap_or(false);
    let cycle = s.take("cycle");
    s.ensure_consumed("eval")?;

    if !ckpt.exists() {
        bail!("checkpoint {} does not exist", ckpt.display());
    }
    let (header, mut net) = load_checkpoint(&ckpt)?;
    if let Some(c) = cycle {
        let wanted: CycleMode = serde_json::from_value(serde_json::Value::from(c.as_str()))
            .map_err(|_| anyhow::anyhow!("unknown cycle mode `{c}` (asymmetric|symmetric)"))?;
        if wanted != header.config.cycle {
            bail!(
                "incompatible configuration: checkpoint was trained with cycle={:?}, requested {c}",
                header.config.cycle
            );
        }
    }
    if strict {
        if let AnyNetwork::Divine(d) = &mut net {
            d.config.strict = true;
        }
    }
    let dataset = load_dataset(&data_path)?;
    if dataset.manifest.dims.d_v != header.config.d_v || dataset.manifest.dims.d_a != header.config.d_a {
        bail!(
            "incompatible dataset: checkpoint expects d_v={} d_a={}, manifest has d_v={} d_a={}",
            header.config.d_v,
            header.config.d_a,
            dataset.manifest.dims.d_v,
            dataset.manifest.dims.d_a
        );
    }
    if !net.supports(modality) {
        bail!(
            "unsupported configuration: {} cannot be evaluated with modality {}",
            header.architecture.name(),
            modality.name()
        );
    }
    let clips: Vec<&EmbeddingClip> = match &split_path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let split: SplitFile = serde_json::from_str(&text)?;
            let by_id: BTreeMap<&str, &EmbeddingClip> =
                dataset.clips.iter().map(|c| (c.clip_id.as_str(), c)).collect();
            split
                .test_clip_ids
                .iter()
                .map(|id| by_id.get(id.as_str()).copied().with_context(|| format!("clip {id} not in dataset")))
                .collect::<Result<_>>()?
        }
        None => dataset.clips.iter().collect(),
    };
    let (metrics, losses) = evaluate_clips(&net, &clips, modality, &dataset.manifest.severity_scores())?;
    let agg = aggregate(&[&metrics])?;
    let variant = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    let rows = vec![ComparisonRow::from_aggregate(variant, modality, &agg)];
    print!("{}", render_table(&rows));
    print!("{}", render_confusion(&metrics.confusion, &dataset.manifest.diagnosis_labels));
    if let Some(out) = out {
        create_dir(&out)?;
        #[derive(Serialize)]
        struct EvalOutput<'a> {
            checkpoint: String,
            modality: Modality,
            metrics: &'a MetricsReport,
            losses: &'a divine::model::LossBreakdown,
        }
        write_json(
            &out.join("eval.json"),
            &EvalOutput {
                checkpoint: ckpt.display().to_string(),
                modality,
                metrics: &metrics,
                losses: &losses,
            },
        )?;
        let mut csv = Vec::new();
        write_comparison_csv(&mut csv, &rows)?;
        write_file(&out.join("eval.csv"), csv)?;
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let mut s = args.train.settings()?;
    if let Some(v) = &args.suite {
        s.set("suite", v);
    }
    let suite: Suite = s.take_parsed("suite")?.context("`--suite` is required")?;
    let (t, s) = train_setup(s)?;
    s.ensure_consumed("ablate")?;
    create_dir(&t.out)?;
    write_file(
        &t.out.join("config.txt"),
        setup_echo(&t, &[("suite".to_string(), suite.name().to_string())])?,
    )?;
    let report = run_ablation(&t.dataset, &t.model, &t.train, suite, &t.options)?;
    let mut csv = Vec::new();
    write_comparison_csv(&mut csv, &report.rows)?;
    write_file(&t.out.join(format!("{}.csv", suite.name())), csv)?;
    write_json(&t.out.join(format!("{}.json", suite.name())), &report)?;
    print!("{}", render_table(&report.rows));
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let mut records = Vec::new();
    for p in &args.records {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let r: ExperimentRecord =
            serde_json::from_str(&text).with_context(|| format!("{} is not an experiment record", p.display()))?;
        records.push(r);
    }
    let labels = records[0].class_labels.clone();
    for (r, p) in records.iter().zip(&args.records).skip(1) {
        if r.class_labels != labels {
            bail!(
                "cannot merge records with different label spaces: {} has {:?}, {} has {:?}",
                args.records[0].display(),
                labels,
                p.display(),
                r.class_labels
            );
        }
    }
    let mut variants: Vec<&str> = Vec::new();
    for r in &records {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    let variant = variants.join("+");
    let mut by_mode: BTreeMap<&str, Vec<&MetricsReport>> = BTreeMap::new();
    for r in &records {
        for run in &r.runs {
            for (mode, m) in &run.metrics {
                by_mode.entry(mode.as_str()).or_default().push(m);
            }
        }
    }
    let mut rows = Vec::new();
    let mut confusion = BTreeMap::new();
    for mode in Modality::ALL {
        if let Some(ms) = by_mode.get(mode.name()) {
            let agg = aggregate(ms)?;
            rows.push(ComparisonRow::from_aggregate(&variant, mode, &agg));
            confusion.insert(mode.name().to_string(), agg.confusion);
        }
    }
    let text = confusion_text(&labels, &confusion);
    print!("{}", render_table(&rows));
    print!("\n{text}");
    if let Some(out) = &args.out {
        create_dir(out)?;
        let mut csv = Vec::new();
        write_comparison_csv(&mut csv, &rows)?;
        write_file(&out.join("report.csv"), csv)?;
        write_file(&out.join("confusion.txt"), text)?;
    }
    Ok(())
}

//! Ablation and baseline suites producing comparison tables.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::cv::{cross_validate, CvOptions, ExperimentRecord};
use super::metrics::{AggregateMetrics, Summary};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Architecture, Modality, ModelConfig};

pub const CSV_HEADER: [&str; 10] = ["variant", "mode", "A", "F1", "M", "R", "A_std", "F1_std", "M_std", "R_std"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// One trained model, evaluated with both, audio-only and video-only input.
    Modalities,
    /// Full model and one retrain per disabled regularizer.
    Regularization,
    /// Full model, flat fusion and the single-level variant.
    Disentanglement,
    /// Single-modality and fusion baselines next to the full model.
    Baselines,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Modalities, Suite::Regularization, Suite::Disentanglement, Suite::Baselines];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Modalities => "modalities",
            Suite::Regularization => "regularization",
            Suite::Disentanglement => "disentanglement",
            Suite::Baselines => "baselines",
        }
    }

    /// Variants trained by this suite, each with the modes it reports.
    pub fn variants(self, base: &TrainConfig) -> Vec<(String, TrainConfig, Vec<Modality>)> {
        let full = TrainConfig {
            no_cycle: false,
            no_sparse: false,
            no_token: false,
            flat: false,
            single_level: false,
            architecture: Architecture::Divine,
            ..base.clone()
        };
        let both = vec![Modality::Both];
        let with = |f: &dyn Fn(&mut TrainConfig)| {
            let mut c = full.clone();
            f(&mut c);
            c
        };
        match self {
            Suite::Modalities => vec![(
                "full".into(),
                full.clone(),
                vec![Modality::Both, Modality::AudioOnly, Modality::VideoOnly],
            )],
            Suite::Regularization => vec![
                ("full".into(), full.clone(), both.clone()),
                ("no_cycle".into(), with(&|c| c.no_cycle = true), both.clone()),
                ("no_sparse".into(), with(&|c| c.no_sparse = true), both.clone()),
                ("no_token".into(), with(&|c| c.no_token = true), both),
            ],
            Suite::Disentanglement => vec![
                ("full".into(), full.clone(), both.clone()),
                ("flat".into(), with(&|c| c.flat = true), both.clone()),
                ("single_level".into(), with(&|c| c.single_level = true), both),
            ],
            Suite::Baselines => {
                let mut rows: Vec<(String, TrainConfig, Vec<Modality>)> = [
                    (Architecture::FcnVideo, Modality::VideoOnly),
                    (Architecture::FcnAudio, Modality::AudioOnly),
                    (Architecture::CnnVideo, Modality::VideoOnly),
                    (Architecture::CnnAudio, Modality::AudioOnly),
                    (Architecture::Concat, Modality::Both),
                    (Architecture::Flat, Modality::Both),
                ]
                .into_iter()
                .map(|(a, m)| (a.name().to_string(), with(&|c| c.architecture = a), vec![m]))
                .collect();
                rows.push(("full".into(), full, both));
                rows
            }
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown suite `{s}` (expected one of: modalities, regularization, disentanglement, baselines)"
                ))
            })
    }
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: String,
    pub mode: Modality,
    pub accuracy: Summary,
    pub macro_f1: Summary,
    pub mae: Option<Summary>,
    pub rmse: Option<Summary>,
}

impl ComparisonRow {
    pub fn from_aggregate(variant: &str, mode: Modality, agg: &AggregateMetrics) -> Self {
        ComparisonRow {
            variant: variant.to_string(),
            mode,
            accuracy: agg.accuracy,
            macro_f1: agg.macro_f1,
            mae: agg.mae,
            rmse: agg.rmse,
        }
    }

    /// Values in [`CSV_HEADER`] order.
    pub fn fields(&self) -> Vec<String> {
        let fixed = |v: f64| format!("{v:.4}");
        let opt = |s: Option<Summary>, std: bool| {
            s.map(|s| fixed(if std { s.std } else { s.mean })).unwrap_or_else(|| "NA".into())
        };
        vec![
            self.variant.clone(),
            self.mode.name().to_string(),
            fixed(self.accuracy.mean),
            fixed(self.macro_f1.mean),
            opt(self.mae, false),
            opt(self.rmse, false),
            fixed(self.accuracy.std),
            fixed(self.macro_f1.std),
            opt(self.mae, true),
            opt(self.rmse, true),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub suite: Suite,
    pub rows: Vec<ComparisonRow>,
    pub records: Vec<ExperimentRecord>,
}

/// Comparison rows for the given modes of a record.
pub fn rows_for(record: &ExperimentRecord, modes: &[Modality]) -> Result<Vec<ComparisonRow>> {
    modes
        .iter()
        .map(|&m| {
            let agg = record.aggregate.get(m.name()).ok_or_else(|| {
                Error::Unsupported(format!("variant {} was not evaluated in mode {}", record.variant, m.name()))
            })?;
            Ok(ComparisonRow::from_aggregate(&record.variant, m, agg))
        })
        .collect()
}

/// Trains every variant of `suite` under the same cross-validation options.
pub fn run_ablation(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    suite: Suite,
    options: &CvOptions,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for (variant, cfg, modes) in suite.variants(base) {
        let opts = CvOptions {
            modes: modes.clone(),
            ..options.clone()
        };
        let (record, _) = cross_validate(dataset, &variant, model_cfg, &cfg, &opts)?;
        rows.extend(rows_for(&record, &modes)?);
        records.push(record);
    }
    Ok(AblationReport { suite, rows, records })
}

pub fn write_comparison_csv<W: Write>(out: W, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Aligned text table with the same columns as the CSV.
pub fn render_table(rows: &[ComparisonRow]) -> String {
    let cells: Vec<Vec<String>> = std::iter::once(CSV_HEADER.iter().map(|s| s.to_string()).collect())
        .chain(rows.iter().map(ComparisonRow::fields))
        .collect();
    let widths: Vec<usize> = (0..CSV_HEADER.len())
        .map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (v, &w))| if i < 2 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

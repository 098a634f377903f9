//! Synthetic audio/video embedding generator with known latent factors.
//!
//! Each clip draws a diagnosis class `c`, a shared factor `s ~ N(μ_c, I)` and
//! one private factor per modality `p_m ~ N(0, I)`. Every modality renders
//! its frames through a fixed random mixing map:
//!
//! ```text
//! X_m[t] = tanh(W_m [s; p_m] + b_m + drift_m · t / T) + σ_n · noise
//! ```
//!
//! Diagnosis depends on `s` alone, so the private factors carry no class
//! information by construction.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{ClipRecord, Dataset, Dims, EmbeddingClip, Manifest, SeverityLevel, TaskTag};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Sequence};

/// Feature-scale fraction of the linear temporal drift.
pub const DRIFT_AMPLITUDE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_subjects: usize,
    pub clips_per_subject: usize,
    pub n_classes: usize,
    pub d_shared0: usize,
    pub d_priv0_video: usize,
    pub d_priv0_audio: usize,
    pub d_v: usize,
    pub d_a: usize,
    /// Inclusive step-count range for video sequences.
    pub t_video: (usize, usize),
    pub t_audio: (usize, usize),
    /// Pairwise distance between class means of the shared factor.
    pub separation: f64,
    pub noise: f64,
    /// Number of graded levels for non-healthy clips.
    pub severity_levels: usize,
    /// Class 0 plays the healthy-control role and gets a dedicated "None" level.
    pub healthy_class0: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_subjects: 40,
            clips_per_subject: 30,
            n_classes: 3,
            d_shared0: 4,
            d_priv0_video: 4,
            d_priv0_audio: 4,
            d_v: 64,
            d_a: 64,
            t_video: (28, 36),
            t_audio: (28, 36),
            separation: 4.0,
            noise: 0.5,
            severity_levels: 3,
            healthy_class0: true,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_subjects == 0 || self.clips_per_subject == 0 {
            problems.push("n_subjects and clips_per_subject must be positive".to_string());
        }
        if self.n_classes < 2 {
            problems.push(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.d_shared0 < self.n_classes {
            problems.push(format!(
                "d_shared0 ({}) must be at least n_classes ({}) to place Δ-separated class means",
                self.d_shared0, self.n_classes
            ));
        }
        let d_priv = self.d_priv0_video.max(self.d_priv0_audio);
        if self.d_shared0 + d_priv > self.d_v.min(self.d_a) {
            problems.push(format!(
                "d_shared0 + d_priv0 ({}) exceeds min(d_v, d_a) ({})",
                self.d_shared0 + d_priv,
                self.d_v.min(self.d_a)
            ));
        }
        for (name, (lo, hi)) in [("t_video", self.t_video), ("t_audio", self.t_audio)] {
            if lo < 2 || hi < lo {
                problems.push(format!("{name} range ({lo}, {hi}) must satisfy 2 <= lo <= hi"));
            }
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            problems.push(format!("separation must be finite and >= 0, got {}", self.separation));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            problems.push(format!("noise must be finite and >= 0, got {}", self.noise));
        }
        let total_levels = self.severity_levels + usize::from(self.healthy_class0);
        if self.severity_levels == 0 || total_levels < 2 {
            problems.push(format!(
                "need at least 2 severity levels in total, got {total_levels}"
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    fn diagnosis_labels(&self) -> Vec<String> {
        if self.n_classes == 3 {
            vec!["HC".into(), "ALS".into(), "Stroke".into()]
        } else {
            (0..self.n_classes).map(|c| format!("C{c}")).collect()
        }
    }

    fn level_table(&self) -> Vec<SeverityLevel> {
        let graded: Vec<String> = if self.severity_levels == 3 {
            vec!["Mild".into(), "Moderate".into(), "Severe".into()]
        } else {
            (1..=self.severity_levels).map(|i| format!("Level{i}")).collect()
        };
        let mut levels = Vec::new();
        if self.healthy_class0 {
            levels.push("None".to_string());
        }
        levels.extend(graded);
        levels
            .into_iter()
            .enumerate()
            .map(|(i, name)| SeverityLevel {
                name,
                score: (i + usize::from(!self.healthy_class0)) as f64,
            })
            .collect()
    }
}

/// Ground-truth latent factors of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorRow {
    pub clip_id: String,
    pub class: usize,
    pub severity: usize,
    pub shared: Vec<f64>,
    pub private_video: Vec<f64>,
    pub private_audio: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub factors: Vec<FactorRow>,
    /// Class means of the shared factor.
    pub class_means: Vec<Vec<f64>>,
}

struct Renderer {
    mixing: Matrix,
    bias: Vec<f64>,
    drift: Vec<f64>,
}

impl Renderer {
    fn new(dim: usize, latent: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (latent as f64).sqrt();
        let mixing = Matrix::from_vec(
            dim,
            latent,
            (0..dim * latent).map(|_| scale * normal(rng)).collect(),
        )
        .expect("shape");
        let bias = (0..dim).map(|_| 0.1 * normal(rng)).collect();
        let drift = (0..dim)
            .map(|_| if rng.random_bool(0.5) { DRIFT_AMPLITUDE } else { -DRIFT_AMPLITUDE })
            .collect();
        Renderer { mixing, bias, drift }
    }

    fn render(&self, latent: &[f64], steps: usize, noise: f64, rng: &mut ChaCha8Rng) -> Sequence {
        let d = self.mixing.rows();
        let base: Vec<f64> = self
            .mixing
            .row_iter()
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(latent).map(|(a, z)| a * z).sum::<f64>() + b)
            .collect();
        let mut data = Vec::with_capacity(steps * d);
        for t in 0..steps {
            let frac = t as f64 / steps as f64;
            for j in 0..d {
                let v = (base[j] + self.drift[j] * frac).tanh() + noise * normal(rng);
                // Stored values are exactly representable in the f32 container.
                data.push(f64::from(v as f32));
            }
        }
        Sequence::from_vec(steps, d, data).expect("shape")
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn synth_generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let corner = spec.separation / std::f64::consts::SQRT_2;
    let class_means: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|c| {
            let mut m = vec![0.0; spec.d_shared0];
            m[c] = corner;
            m
        })
        .collect();
    let video = Renderer::new(spec.d_v, spec.d_shared0 + spec.d_priv0_video, &mut rng);
    let audio = Renderer::new(spec.d_a, spec.d_shared0 + spec.d_priv0_audio, &mut rng);

    let mut clips = Vec::with_capacity(spec.n_subjects * spec.clips_per_subject);
    let mut factors = Vec::with_capacity(clips.capacity());
    for subject in 0..spec.n_subjects {
        // Balanced class proportions within every subject.
        let mut classes: Vec<usize> = (0..spec.clips_per_subject)
            .map(|i| (i + subject) % spec.n_classes)
            .collect();
        classes.shuffle(&mut rng);
        for (ci, &class) in classes.iter().enumerate() {
            let shared: Vec<f64> = class_means[class].iter().map(|m| m + normal(&mut rng)).collect();
            let pv: Vec<f64> = (0..spec.d_priv0_video).map(|_| normal(&mut rng)).collect();
            let pa: Vec<f64> = (0..spec.d_priv0_audio).map(|_| normal(&mut rng)).collect();
            let tv = rng.random_range(spec.t_video.0..=spec.t_video.1);
            let ta = rng.random_range(spec.t_audio.0..=spec.t_audio.1);
            let xv = video.render(&[shared.as_slice(), &pv].concat(), tv, spec.noise, &mut rng);
            let xa = audio.render(&[shared.as_slice(), &pa].concat(), ta, spec.noise, &mut rng);
            let clip_id = format!("S{subject:03}_C{ci:03}");
            clips.push(EmbeddingClip {
                clip_id: clip_id.clone(),
                subject_id: format!("S{subject:03}"),
                task_tag: if ci % 2 == 0 { TaskTag::Speech } else { TaskTag::Nonspeech },
                video: xv,
                audio: Some(xa),
                diagnosis: class,
                severity_level: 0,
                severity_score: None,
            });
            factors.push(FactorRow {
                clip_id,
                class,
                severity: 0,
                shared,
                private_video: pv,
                private_audio: pa,
            });
        }
    }

    assign_severity(spec, &class_means, &mut clips, &mut factors);
    let levels = spec.level_table();
    for clip in &mut clips {
        clip.severity_score = Some(levels[clip.severity_level].score);
    }

    let manifest = Manifest {
        diagnosis_labels: spec.diagnosis_labels(),
        severity_levels: levels,
        dims: Dims { d_v: spec.d_v, d_a: spec.d_a },
        clips: clips.iter().map(ClipRecord::relative_to).collect(),
    };
    Ok(SyntheticData {
        dataset: Dataset { manifest, clips },
        factors,
        class_means,
    })
}

/// Buckets `‖s − μ_c‖` into equal-count quantile levels over the graded clips.
fn assign_severity(
    spec: &SyntheticSpec,
    means: &[Vec<f64>],
    clips: &mut [EmbeddingClip],
    factors: &mut [FactorRow],
) {
    let offset = usize::from(spec.healthy_class0);
    let graded: Vec<usize> = (0..factors.len())
        .filter(|&i| !(spec.healthy_class0 && factors[i].class == 0))
        .collect();
    let radius = |i: usize| -> f64 {
        let f = &factors[i];
        f.shared
            .iter()
            .zip(&means[f.class])
            .map(|(s, m)| (s - m) * (s - m))
            .sum::<f64>()
            .sqrt()
    };
    let mut order = graded.clone();
    order.sort_by(|&a, &b| radius(a).total_cmp(&radius(b)).then(a.cmp(&b)));
    let n = order.len().max(1);
    for (rank, &i) in order.iter().enumerate() {
        let level = offset + (rank * spec.severity_levels / n).min(spec.severity_levels - 1);
        factors[i].severity = level;
        clips[i].severity_level = level;
    }
}

/// Writes the factor table as CSV:
/// `clip_id,class,severity,s_0..,pv_0..,pa_0..`.
pub fn write_factor_table(rows: &[FactorRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    if let Some(first) = rows.first() {
        let mut header = vec!["clip_id".to_string(), "class".into(), "severity".into()];
        header.extend((0..first.shared.len()).map(|i| format!("s_{i}")));
        header.extend((0..first.private_video.len()).map(|i| format!("pv_{i}")));
        header.extend((0..first.private_audio.len()).map(|i| format!("pa_{i}")));
        w.write_record(&header)?;
    }
    for r in rows {
        let mut rec = vec![r.clip_id.clone(), r.class.to_string(), r.severity.to_string()];
        rec.extend(
            r.shared
                .iter()
                .chain(&r.private_video)
                .chain(&r.private_audio)
                .map(|v| format!("{v:?}")),
        );
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_factor_table(path: impl AsRef<Path>) -> Result<Vec<FactorRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let count = |prefix: &str| header.iter().filter(|h| h.starts_with(prefix)).count();
    let (ns, nv, na) = (count("s_"), count("pv_"), count("pa_"));
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = |what: &str| Error::Config(format!("factor table {}: bad {what}", path.display()));
        let num = |i: usize| -> Result<f64> { rec.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| bad("number")) };
        let vals: Vec<f64> = (3..3 + ns + nv + na).map(num).collect::<Result<_>>()?;
        rows.push(FactorRow {
            clip_id: rec.get(0).ok_or_else(|| bad("clip_id"))?.to_string(),
            class: rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| bad("class"))?,
            severity: rec.get(2).and_then(|v| v.parse().ok()).ok_or_else(|| bad("severity"))?,
            shared: vals[..ns].to_vec(),
            private_video: vals[ns..ns + nv].to_vec(),
            private_audio: vals[ns + nv..].to_vec(),
        });
    }
    Ok(rows)
}

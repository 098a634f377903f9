//! Linear probes on the learned latents of a trained network.
//!
//! Probes are closed-form ridge regressions fitted on one half of the subjects
//! and scored on the other half. Class probes regress one-hot labels and
//! predict by argmax.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::trainer::EVAL_CHUNK;
use crate::data::folds::plan_for_subjects;
use crate::data::{Dataset, EmbeddingClip, FactorRow};
use crate::error::{Error, Result};
use crate::model::{AnyNetwork, Batch, ForwardMode, Modality};
use crate::numerics::Matrix;

/// Ridge penalty per training sample, on standardized features.
pub const PROBE_RIDGE: f64 = 1e-2;

/// Eval-mode posterior means, one row per clip.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFeatures {
    pub shared_video: Matrix,
    pub shared_audio: Matrix,
    pub private_video: Matrix,
    pub private_audio: Matrix,
}

pub fn extract_latents(net: &AnyNetwork, clips: &[&EmbeddingClip]) -> Result<LatentFeatures> {
    let AnyNetwork::Divine(model) = net else {
        return Err(Error::Unsupported(format!(
            "latent probes need a network with shared and private latents, got {}",
            net.architecture().name()
        )));
    };
    let mut parts: [Vec<Matrix>; 4] = Default::default();
    for chunk in clips.chunks(EVAL_CHUNK) {
        let batch = Batch::from_clips(chunk)?;
        let (trace, _) = model.forward(&batch, ForwardMode::eval(Modality::Both), None)?;
        let (Some(v), Some(a)) = (trace.video, trace.audio) else {
            return Err(Error::Unsupported("latent probes need clips with both modalities".into()));
        };
        parts[0].push(v.mu_s);
        parts[1].push(a.mu_s);
        parts[2].push(v.mu_p);
        parts[3].push(a.mu_p);
    }
    let cat = |p: &[Matrix]| Matrix::vcat(&p.iter().collect::<Vec<_>>());
    Ok(LatentFeatures {
        shared_video: cat(&parts[0])?,
        shared_audio: cat(&parts[1])?,
        private_video: cat(&parts[2])?,
        private_audio: cat(&parts[3])?,
    })
}

/// Linear map fitted on standardized inputs.
#[derive(Debug, Clone)]
pub struct RidgeProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    y_mean: Vec<f64>,
    weights: DMatrix<f64>,
}

impl RidgeProbe {
    pub fn fit(x: &Matrix, y: &Matrix, ridge: f64) -> Result<Self> {
        let (n, d) = x.shape();
        if n == 0 || y.rows() != n {
            return Err(Error::dim("probe rows", n, y.rows()));
        }
        let mean: Vec<f64> = x.col_sums().iter().map(|s| s / n as f64).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let var = x.row_iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let y_mean: Vec<f64> = y.col_sums().iter().map(|s| s / n as f64).collect();
        let xs = standardize(x, &mean, &scale);
        let ys = DMatrix::from_fn(n, y.cols(), |i, j| y[(i, j)] - y_mean[j]);
        let gram = xs.transpose() * &xs + DMatrix::identity(d, d) * (ridge * n as f64);
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Invariant("probe normal equations are not positive definite".into()))?;
        let weights = chol.solve(&(xs.transpose() * ys));
        Ok(RidgeProbe {
            mean,
            scale,
            y_mean,
            weights,
        })
    }

    pub fn predict(&self, x: &Matrix) -> Matrix {
        let out = standardize(x, &self.mean, &self.scale) * &self.weights;
        let mut m = Matrix::zeros(out.nrows(), out.ncols());
        for i in 0..out.nrows() {
            for j in 0..out.ncols() {
                m[(i, j)] = out[(i, j)] + self.y_mean[j];
            }
        }
        m
    }
}

fn standardize(x: &Matrix, mean: &[f64], scale: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(x.rows(), x.cols(), |i, j| (x[(i, j)] - mean[j]) / scale[j])
}

fn one_hot(labels: &[usize], k: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), k);
    for (i, &c) in labels.iter().enumerate() {
        m[(i, c)] = 1.0;
    }
    m
}

fn take(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), m.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    out
}

/// Test accuracy (%) of a one-vs-rest ridge classifier.
pub fn class_probe(x: &Matrix, labels: &[usize], k: usize, train: &[usize], test: &[usize]) -> Result<f64> {
    let y: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let probe = RidgeProbe::fit(&take(x, train), &one_hot(&y, k), PROBE_RIDGE)?;
    let pred = probe.predict(&take(x, test));
    let correct = pred
        .row_iter()
        .zip(test)
        .filter(|(row, &i)| {
            let arg = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            arg == labels[i]
        })
        .count();
    Ok(100.0 * correct as f64 / test.len() as f64)
}

/// Test R² of a ridge regression, averaged over target columns.
pub fn r2_probe(x: &Matrix, y: &Matrix, train: &[usize], test: &[usize]) -> Result<f64> {
    let probe = RidgeProbe::fit(&take(x, train), &take(y, train), PROBE_RIDGE)?;
    let yt = take(y, test);
    let pred = probe.predict(&take(x, test));
    let n = test.len() as f64;
    let mut total = 0.0;
    for j in 0..y.cols() {
        let mean = (0..yt.rows()).map(|i| yt[(i, j)]).sum::<f64>() / n;
        let sst: f64 = (0..yt.rows()).map(|i| (yt[(i, j)] - mean).powi(2)).sum();
        let sse: f64 = (0..yt.rows()).map(|i| (yt[(i, j)] - pred[(i, j)]).powi(2)).sum();
        total += if sst > 0.0 { 1.0 - sse / sst } else { 0.0 };
    }
    Ok(total / y.cols() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub train_clips: usize,
    pub test_clips: usize,
    /// `100 / K`.
    pub chance: f64,
    pub class_from_shared_video: f64,
    pub class_from_shared_audio: f64,
    pub class_from_private_video: f64,
    pub class_from_private_audio: f64,
    /// Mean of the two shared-latent class probes.
    pub class_from_shared: f64,
    /// Mean of the two private-latent class probes.
    pub class_from_private: f64,
    /// Class probes refitted after permuting all labels.
    pub permuted_from_shared: f64,
    pub permuted_from_private: f64,
    /// R² of the true private factors of each modality.
    pub private_r2_from_private_video: f64,
    pub private_r2_from_shared_video: f64,
    pub private_r2_from_private_audio: f64,
    pub private_r2_from_shared_audio: f64,
}

/// Fits every probe on a seeded two-way subject split.
pub fn disentanglement_probe(
    net: &AnyNetwork,
    dataset: &Dataset,
    factors: Option<&[FactorRow]>,
    seed: u64,
) -> Result<ProbeReport> {
    let factors = factors.ok_or_else(|| {
        Error::Unsupported("disentanglement probes need a dataset with a ground-truth factor table".into())
    })?;
    let by_id: HashMap<&str, &FactorRow> = factors.iter().map(|f| (f.clip_id.as_str(), f)).collect();
    let rows: Vec<&FactorRow> = dataset
        .clips
        .iter()
        .map(|c| {
            by_id
                .get(c.clip_id.as_str())
                .copied()
                .ok_or_else(|| Error::Unsupported(format!("factor table has no row for clip {}", c.clip_id)))
        })
        .collect::<Result<_>>()?;
    let clips: Vec<&EmbeddingClip> = dataset.clips.iter().collect();
    let z = extract_latents(net, &clips)?;

    let plan = plan_for_subjects(clips.iter().map(|c| c.subject_id.as_str()), 2, seed)?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, c) in clips.iter().enumerate() {
        if plan.fold_of(&c.subject_id) == Some(0) {
            train.push(i);
        } else {
            test.push(i);
        }
    }
    let k = dataset.manifest.num_classes();
    let labels: Vec<usize> = clips.iter().map(|c| c.diagnosis).collect();
    let mut permuted = labels.clone();
    permuted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let pv = Matrix::from_rows(&rows.iter().map(|r| r.private_video.clone()).collect::<Vec<_>>())?;
    let pa = Matrix::from_rows(&rows.iter().map(|r| r.private_audio.clone()).collect::<Vec<_>>())?;
    let class = |x: &Matrix, y: &[usize]| class_probe(x, y, k, &train, &test);

    let csv_ = class(&z.shared_video, &labels)?;
    let csa = class(&z.shared_audio, &labels)?;
    let cpv = class(&z.private_video, &labels)?;
    let cpa = class(&z.private_audio, &labels)?;
    let perm_s = (class(&z.shared_video, &permuted)? + class(&z.shared_audio, &permuted)?) / 2.0;
    let perm_p = (class(&z.private_video, &permuted)? + class(&z.private_audio, &permuted)?) / 2.0;
    Ok(ProbeReport {
        train_clips: train.len(),
        test_clips: test.len(),
        chance: 100.0 / k as f64,
        class_from_shared_video: csv_,
        class_from_shared_audio: csa,
        class_from_private_video: cpv,
        class_from_private_audio: cpa,
        class_from_shared: (csv_ + csa) / 2.0,
        class_from_private: (cpv + cpa) / 2.0,
        permuted_from_shared: perm_s,
        permuted_from_private: perm_p,
        private_r2_from_private_video: r2_probe(&z.private_video, &pv, &train, &test)?,
        private_r2_from_shared_video: r2_probe(&z.shared_video, &pv, &train, &test)?,
        private_r2_from_private_audio: r2_probe(&z.private_audio, &pa, &train, &test)?,
        private_r2_from_shared_audio: r2_probe(&z.shared_audio, &pa, &train, &test)?,
    })
}

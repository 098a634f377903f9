//! Mini-batch Adam with validation-loss early stopping.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::data::EmbeddingClip;
use crate::error::{Error, Result};
use crate::model::{AnyNetwork, Batch, Evaluation, LossBreakdown, Modality};
use crate::numerics::{adam_step, AdamState, Matrix};

/// Clips per evaluation batch.
pub const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation loss; stops after `patience` epochs without
/// improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.since_best = 0;
            StopDecision::Improved
        } else {
            self.since_best += 1;
            if self.since_best >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub network: AnyNetwork,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Total loss of the first mini-batch, before any update.
    pub initial_train_loss: f64,
}

/// Predictions for a clip set, evaluated in chunks.
pub fn predict(net: &AnyNetwork, clips: &[&EmbeddingClip], modality: Modality) -> Result<Evaluation> {
    if clips.is_empty() {
        return Err(Error::Config("cannot evaluate an empty clip set".into()));
    }
    let mut cls = Vec::with_capacity(clips.len());
    let mut sev = Vec::with_capacity(clips.len());
    let mut losses = LossBreakdown::default();
    for chunk in clips.chunks(EVAL_CHUNK) {
        let batch = Batch::from_clips(chunk)?;
        let e = net.evaluate(&batch, modality)?;
        losses.accumulate(&e.losses, chunk.len() as f64 / clips.len() as f64);
        cls.push(e.cls_probs);
        sev.push(e.sev_probs);
    }
    Ok(Evaluation {
        cls_probs: Matrix::vcat(&cls.iter().collect::<Vec<_>>())?,
        sev_probs: Matrix::vcat(&sev.iter().collect::<Vec<_>>())?,
        losses,
    })
}

/// Trains `net` on `train`, early-stopping on the validation total loss and
/// restoring the best snapshot.
pub fn train<R: Rng + ?Sized>(
    mut net: AnyNetwork,
    train: &[&EmbeddingClip],
    val: &[&EmbeddingClip],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "empty split: {} training and {} validation clips",
            train.len(),
            val.len()
        )));
    }
    let mut adam = AdamState::new(&net, cfg.adam());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = net.clone();
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut last_finite = LossBreakdown::default();
    let mut initial_train_loss = f64::NAN;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(rng);
        let mut epoch_loss = LossBreakdown::default();
        for idx in order.chunks(cfg.batch_size) {
            let clips: Vec<&EmbeddingClip> = idx.iter().map(|&i| train[i]).collect();
            let batch = Batch::from_clips(&clips)?;
            let step = net.train_step(&batch, cfg.dropout, rng).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("{msg}; last finite losses: {last_finite:?}")),
                other => other,
            })?;
            if initial_train_loss.is_nan() {
                initial_train_loss = step.losses.total;
            }
            last_finite = step.losses;
            adam_step(&mut net, &step.grad, &mut adam)?;
            net.apply_bn_stats(&step.bn_stats);
            epoch_loss.accumulate(&step.losses, clips.len() as f64 / train.len() as f64);
        }
        let val_loss = predict(&net, val, Modality::Both)?.losses;
        if !val_loss.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "validation loss at epoch {epoch}; last finite losses: {last_finite:?}"
            )));
        }
        epochs.push(EpochRecord {
            epoch,
            train: epoch_loss,
            val: val_loss,
        });
        match stopper.observe(epoch, val_loss.total) {
            StopDecision::Improved => best = net.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    Ok(TrainOutcome {
        network: best,
        epochs,
        best_epoch: stopper.best_epoch.unwrap_or(0),
        best_val_loss: stopper.best,
        initial_train_loss,
    })
}

//! Uniform training/evaluation surface over every architecture.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::baselines::{CnnNet, Evaluation, FlatFusion, MlpNet, Source};
use super::batch::Batch;
use super::config::{Modality, ModelConfig, Objective};
use super::divine::{Divine, ForwardMode, Noise};
use super::loss::LossBreakdown;
use super::refiner::RefinerTrace;
use crate::error::{Error, Result};
use crate::numerics::params::{Params, Slot, SlotMut};
use crate::numerics::BatchNorm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Divine,
    SingleLevel,
    Flat,
    FcnVideo,
    FcnAudio,
    CnnVideo,
    CnnAudio,
    Concat,
}

impl Architecture {
    pub const ALL: [Architecture; 8] = [
        Architecture::Divine,
        Architecture::SingleLevel,
        Architecture::Flat,
        Architecture::FcnVideo,
        Architecture::FcnAudio,
        Architecture::CnnVideo,
        Architecture::CnnAudio,
        Architecture::Concat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Divine => "divine",
            Architecture::SingleLevel => "single_level",
            Architecture::Flat => "flat",
            Architecture::FcnVideo => "fcn_video",
            Architecture::FcnAudio => "fcn_audio",
            Architecture::CnnVideo => "cnn_video",
            Architecture::CnnAudio => "cnn_audio",
            Architecture::Concat => "concat",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}`")))
    }
}

/// Batch statistics of one batch-norm layer from a training pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

impl BnStats {
    fn of(trace: &RefinerTrace) -> Option<BnStats> {
        trace.batch_stats().map(|(mean, var, count)| BnStats {
            mean: mean.to_vec(),
            var: var.to_vec(),
            count,
        })
    }
}

/// Result of one training forward/backward pass.
#[derive(Debug, Clone)]
pub struct TrainStep {
    pub losses: LossBreakdown,
    pub grad: AnyNetwork,
    /// Aligned with [`AnyNetwork::batch_norms_mut`].
    pub bn_stats: Vec<Option<BnStats>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyNetwork {
    Divine(Divine),
    Flat(FlatFusion),
    Mlp(MlpNet),
    Cnn(CnnNet),
}

impl AnyNetwork {
    pub fn new<R: Rng + ?Sized>(arch: Architecture, cfg: &ModelConfig, objective: Objective, rng: &mut R) -> Result<Self> {
        let cfg = cfg.clone();
        Ok(match arch {
            Architecture::Divine => AnyNetwork::Divine(Divine::new(cfg, objective, rng)?),
            Architecture::SingleLevel => AnyNetwork::Divine(Divine::single_level(cfg, objective, rng)?),
            Architecture::Flat => AnyNetwork::Flat(FlatFusion::new(&cfg, objective, rng)?),
            Architecture::FcnVideo => AnyNetwork::Mlp(MlpNet::new(Source::Video, &cfg, objective, rng)?),
            Architecture::FcnAudio => AnyNetwork::Mlp(MlpNet::new(Source::Audio, &cfg, objective, rng)?),
            Architecture::Concat => AnyNetwork::Mlp(MlpNet::new(Source::Concat, &cfg, objective, rng)?),
            Architecture::CnnVideo => AnyNetwork::Cnn(CnnNet::new(Source::Video, &cfg, objective, rng)?),
            Architecture::CnnAudio => AnyNetwork::Cnn(CnnNet::new(Source::Audio, &cfg, objective, rng)?),
        })
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            AnyNetwork::Divine(d) if d.window_vae => Architecture::Divine,
            AnyNetwork::Divine(_) => Architecture::SingleLevel,
            AnyNetwork::Flat(_) => Architecture::Flat,
            AnyNetwork::Mlp(m) => match m.source {
                Source::Video => Architecture::FcnVideo,
                Source::Audio => Architecture::FcnAudio,
                Source::Concat => Architecture::Concat,
            },
            AnyNetwork::Cnn(c) => match c.source {
                Source::Audio => Architecture::CnnAudio,
                _ => Architecture::CnnVideo,
            },
        }
    }

    pub fn objective(&self) -> &Objective {
        match self {
            AnyNetwork::Divine(d) => &d.objective,
            AnyNetwork::Flat(f) => &f.objective,
            AnyNetwork::Mlp(m) => &m.objective,
            AnyNetwork::Cnn(c) => &c.objective,
        }
    }

    /// One training pass on `batch`: sampled noise, dropout on the fused
    /// latent, batch statistics in every batch-norm layer.
    pub fn train_step<R: Rng + ?Sized>(&self, batch: &Batch, dropout: f64, rng: &mut R) -> Result<TrainStep> {
        match self {
            AnyNetwork::Divine(d) => {
                let noise = Noise::sample(d, batch, Modality::Both, dropout, rng)?;
                let (trace, losses, grad) = d.loss_and_grad(batch, ForwardMode::train(), Some(&noise))?;
                let stats = [&trace.video, &trace.audio]
                    .into_iter()
                    .map(|t| t.as_ref().and_then(|t| BnStats::of(&t.refiner)))
                    .collect();
                Ok(TrainStep {
                    losses,
                    grad: AnyNetwork::Divine(grad),
                    bn_stats: stats,
                })
            }
            AnyNetwork::Flat(f) => {
                let (losses, grad, traces) = f.loss_and_grad(batch)?;
                let stats = traces.iter().map(|t| t.as_ref().and_then(BnStats::of)).collect();
                Ok(TrainStep {
                    losses,
                    grad: AnyNetwork::Flat(grad),
                    bn_stats: stats,
                })
            }
            AnyNetwork::Mlp(m) => {
                let (losses, grad) = m.loss_and_grad(batch)?;
                Ok(TrainStep {
                    losses,
                    grad: AnyNetwork::Mlp(grad),
                    bn_stats: Vec::new(),
                })
            }
            AnyNetwork::Cnn(c) => {
                let (losses, grad, traces) = c.loss_and_grad(batch)?;
                let stats = traces.iter().map(BnStats::of).collect();
                Ok(TrainStep {
                    losses,
                    grad: AnyNetwork::Cnn(grad),
                    bn_stats: stats,
                })
            }
        }
    }

    /// Evaluation-mode predictions and losses for the given modalities.
    pub fn evaluate(&self, batch: &Batch, modality: Modality) -> Result<Evaluation> {
        match self {
            AnyNetwork::Divine(d) => {
                let (trace, losses) = d.forward(batch, ForwardMode::eval(modality), None)?;
                Ok(Evaluation {
                    cls_probs: trace.cls_probs,
                    sev_probs: trace.sev_probs,
                    losses,
                })
            }
            AnyNetwork::Flat(f) => f.evaluate(batch, modality),
            AnyNetwork::Mlp(m) => m.evaluate(batch, modality),
            AnyNetwork::Cnn(c) => c.evaluate(batch, modality),
        }
    }

    /// Modalities this network can be evaluated under.
    pub fn supports(&self, modality: Modality) -> bool {
        match self {
            AnyNetwork::Divine(d) => {
                !(modality == Modality::AudioOnly && d.config.cycle == super::CycleMode::Asymmetric && d.config.strict)
            }
            AnyNetwork::Flat(_) => true,
            AnyNetwork::Mlp(m) => match m.source {
                Source::Video => modality == Modality::VideoOnly || modality == Modality::Both,
                Source::Audio => modality == Modality::AudioOnly || modality == Modality::Both,
                Source::Concat => true,
            },
            AnyNetwork::Cnn(c) => match c.source {
                Source::Audio => modality.uses_audio(),
                _ => modality.uses_video(),
            },
        }
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        match self {
            AnyNetwork::Divine(d) => vec![&mut d.video.refiner.bn, &mut d.audio.refiner.bn],
            AnyNetwork::Flat(f) => vec![&mut f.video.bn, &mut f.audio.bn],
            AnyNetwork::Mlp(_) => Vec::new(),
            AnyNetwork::Cnn(c) => c.blocks.iter_mut().map(|b| &mut b.bn).collect(),
        }
    }

    pub fn apply_bn_stats(&mut self, stats: &[Option<BnStats>]) {
        for (bn, s) in self.batch_norms_mut().into_iter().zip(stats) {
            if let Some(s) = s {
                bn.update_running(&s.mean, &s.var, s.count);
            }
        }
    }
}

impl Params for AnyNetwork {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Slot<'a>>) {
        match self {
            AnyNetwork::Divine(d) => d.collect(prefix, out),
            AnyNetwork::Flat(f) => f.collect(prefix, out),
            AnyNetwork::Mlp(m) => m.collect(prefix, out),
            AnyNetwork::Cnn(c) => c.collect(prefix, out),
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a>>) {
        match self {
            AnyNetwork::Divine(d) => d.collect_mut(prefix, out),
            AnyNetwork::Flat(f) => f.collect_mut(prefix, out),
            AnyNetwork::Mlp(m) => m.collect_mut(prefix, out),
            AnyNetwork::Cnn(c) => c.collect_mut(prefix, out),
        }
    }
}

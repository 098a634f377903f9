//! Comparison architectures: dense and convolutional single-modality
//! networks, mean-pooled concatenation, and flat (bottleneck-free) fusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batch::Batch;
use super::config::{Modality, ModelConfig, Objective};
use super::divine::{gap, gap_backward};
use super::loss::LossBreakdown;
use super::refiner::{Refiner, RefinerTrace};
use crate::error::{Error, Result};
use crate::numerics::loss::softmax_xent_logit_grad;
use crate::numerics::params::{join, Params, Slot, SlotMut};
use crate::numerics::{cross_entropy_batch, softmax_rows, Activation, Dense, Matrix};

/// Hidden widths of the dense stack.
pub const MLP_WIDTHS: [usize; 3] = [256, 128, 64];
/// Filters of the two convolutional blocks.
pub const CNN_FILTERS: [usize; 2] = [256, 128];
/// Sequences are cropped or zero-padded to this many steps before the CNN.
pub const CNN_STEPS: usize = 32;

/// Which embedding stream feeds a single-input baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Video,
    Audio,
    /// `[mean X_v ; mean X_a]`.
    Concat,
}

impl Source {
    fn supports(self, modality: Modality) -> bool {
        match self {
            Source::Video => modality.uses_video(),
            Source::Audio => modality.uses_audio(),
            Source::Concat => true,
        }
    }
}

/// Softmax diagnosis and severity heads on a shared representation.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub cls: Dense,
    pub sev: Dense,
}

impl Heads {
    pub fn new<R: Rng + ?Sized>(d_in: usize, cfg: &ModelConfig, rng: &mut R) -> Self {
        Heads {
            cls: Dense::glorot(d_in, cfg.n_classes, rng),
            sev: Dense::glorot(d_in, cfg.n_severity, rng),
        }
    }

    pub fn forward(&self, h: &Matrix) -> Result<(Matrix, Matrix)> {
        Ok((softmax_rows(&self.cls.forward(h)?), softmax_rows(&self.sev.forward(h)?)))
    }

    pub fn losses(cls: &Matrix, sev: &Matrix, batch: &Batch, objective: &Objective) -> Result<LossBreakdown> {
        LossBreakdown {
            cls: cross_entropy_batch(cls, &batch.diagnosis)?,
            sev: cross_entropy_batch(sev, &batch.severity)?,
            ..Default::default()
        }
        .finalize(objective)
    }

    /// Accumulates head gradients and returns `dL/dh`.
    pub fn backward(&self, h: &Matrix, cls: &Matrix, sev: &Matrix, batch: &Batch, objective: &Objective, grad: &mut Heads) -> Matrix {
        let mut dh = Matrix::zeros(h.rows(), h.cols());
        for (w, probs, labels, head, ghead) in [
            (objective.cls_weight(), cls, &batch.diagnosis, &self.cls, &mut grad.cls),
            (objective.sev_weight(), sev, &batch.severity, &self.sev, &mut grad.sev),
        ] {
            if w > 0.0 {
                let mut d = softmax_xent_logit_grad(probs, labels);
                d.scale(w);
                dh.add_scaled(&head.backward(h, &d, ghead), 1.0);
            }
        }
        dh
    }
}

impl Params for Heads {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Slot<'a>>) {
        self.cls.collect(&join(prefix, "cls_head"), out);
        self.sev.collect(&join(prefix, "sev_head"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a>>) {
        self.cls.collect_mut(&join(prefix, "cls_head"), out);
        self.sev.collect_mut(&join(prefix, "sev_head"), out);
    }
}

/// ReLU dense stack with the standard widths.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(d_in: usize, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        let mut d = d_in;
        for w in MLP_WIDTHS {
            layers.push(Dense::glorot(d, w, rng));
            d = w;
        }
        Mlp { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::out_dim)
    }

    /// Returns the input followed by every layer's activated output.
    fn forward(&self, x: Matrix) -> Result<Vec<Matrix>> {
        let mut acts = vec![x];
        for layer in &self.layers {
            let y = Activation::Relu.apply_rows(&layer.forward(acts.last().expect("non-empty"))?);
            acts.push(y);
        }
        Ok(acts)
    }

    fn backward(&self, acts: &[Matrix], dy: Matrix, grad: &mut Mlp) -> Matrix {
        let mut d = dy;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let dpre = Activation::Relu.backward_rows(&acts[i + 1], &d);
            d = layer.backward(&acts[i], &dpre, &mut grad.layers[i]);
        }
        d
    }
}

impl Params for Mlp {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Slot<'a>>) {
        self.layers.collect(&join(prefix, "mlp"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a>>) {
        self.layers.collect_mut(&join(prefix, "mlp"), out);
    }
}

/// Predictions plus losses of one batch.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub cls_probs: Matrix,
    pub sev_probs: Matrix,
    pub losses: LossBreakdown,
}

fn mean_rows_of(seqs: &[&Matrix], dim: usize) -> Matrix {
    let mut out = Matrix::zeros(seqs.len(), dim);
    for (r, s) in seqs.iter().enumerate() {
        let sums = s.col_sums();
        for (o, v) in out.row_mut(r).iter_mut().zip(sums) {
            *o = v / s.rows() as f64;
        }
    }
    out
}

/// Dense network on time-averaged embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    pub source: Source,
    pub objective: Objective,
    pub d_v: usize,
    pub d_a: usize,
    pub mlp: Mlp,
    pub heads: Heads,
}

impl MlpNet {
    pub fn new<R: Rng + ?Sized>(source: Source, cfg: &ModelConfig, objective: Objective, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        objective.validate()?;
        let d_in = match source {
            Source::Video => cfg.d_v,
            Source::Audio => cfg.d_a,
            Source::Concat => cfg.d_v + cfg.d_a,
        };
        let mlp = Mlp::new(d_in, rng);
        let heads = Heads::new(mlp.out_dim(), cfg, rng);
        Ok(MlpNet {
            source,
            objective,
            d_v: cfg.d_v,
            d_a: cfg.d_a,
            mlp,
            heads,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.mlp.layers[0].in_dim()
    }

    /// Pooled input; a missing modality is zero-imputed in the concatenation.
    fn input(&self, batch: &Batch, modality: Modality) -> Result<Matrix> {
        if !self.source.supports(modality) {
            return Err(Error::Config(format!(
                "{:?}-input baseline cannot be evaluated as {}",
                self.source,
                modality.name()
            )));
        }
        let video = |b: &Batch| mean_rows_of(&b.video, self.d_v);
        let audio = |b: &Batch| -> Result<Matrix> { Ok(mean_rows_of(b.audio()?, self.d_a)) };
        let x = match self.source {
            Source::Video => video(batch),
            Source::Audio => audio(batch)?,
            Source::Concat => {
                let v = if modality.uses_video() { video(batch) } else { Matrix::zeros(batch.len(), self.d_v) };
                let a = if modality.uses_audio() { audio(batch)? } else { Matrix::zeros(batch.len(), self.d_a) };
                Matrix::hcat(&v, &a)?
            }
        };
        if x.cols() != self.in_dim() {
            return Err(Error::dim("baseline input", self.in_dim(), x.cols()));
        }
        Ok(x)
    }

    pub fn evaluate(&self, batch: &Batch, modality: Modality) -> Result<Evaluation> {
        let acts = self.mlp.forward(self.input(batch, modality)?)?;
        let (cls_probs, sev_probs) = self.heads.forward(acts.last().expect("non-empty"))?;
        let losses = Heads::losses(&cls_probs, &sev_probs, batch, &self.objective)?;
        Ok(Evaluation {
            cls_probs,
            sev_probs,
            losses,
        })
    }

    pub fn loss_and_grad(&self, batch: &Batch) -> Result<(LossBreakdown, MlpNet)> {
        let acts = self.mlp.forward(self.input(batch, Modality::Both)?)?;
        let h = acts.last().expect("non-empty");
        let (cls, sev) = self.heads.forward(h)?;
        let losses = Heads::losses(&cls, &sev, batch, &self.objective)?;
        let mut grad = self.clone();
        grad.zero_all();
        let dh = self.heads.backward(h, &cls, &sev, batch, &self.objective, &mut grad.heads);
        self.mlp.backward(&acts, dh, &mut grad.mlp);
        Ok((losses, grad))
    }
}

impl Params for MlpNet {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Slot<'a>>) {
        self.mlp.collect(prefix, out);
        self.heads.collect(prefix, out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a>>) {
        self.mlp.collect_mut(prefix, out);
        self.heads.collect_mut(prefix, out);
    }
}

/// Crops to the first `steps` rows or zero-pads at the end.
pub fn fit_length(x: &Matrix, steps: usize) -> Matrix {
    let mut out = Matrix::zeros(steps, x.cols());
    for t in 0..steps.min(x.rows()) {
        out.row_mut(t).copy_from_slice(x.row(t));
    }
    out
}

/// Two conv/batchnorm/relu/pool blocks, flattened into the dense stack.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnNet {
    pub source: Source,
    pub objective: Objective,
    pub steps: usize,
    pub blocks: Vec<Refiner>,
    pub mlp: Mlp,
    pub heads: Heads,
}

struct CnnTrace {
    blocks: Vec<RefinerTrace>,
    acts: Vec<Matrix>,
}

impl CnnNet {
    pub fn new<R: Rng + ?Sized>(source: Source, cfg: &ModelConfig, objective: Objective, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        objective.validate()?;
        let d_in = match source {
            Source::Video => cfg.d_v,
            Source::Audio => cfg.d_a,
            Source::Concat => return Err(Error::Config("the CNN baseline takes one modality".into())),
        };
        let blocks = vec![
            Refiner::new(d_in, CNN_FILTERS[0], rng)?,
            Refiner::new(CNN_FILTERS[0], CNN_FILTERS[1], rng)?,
        ];
        let flat = (CNN_STEPS / 4) * CNN_FILTERS[1];
        let mlp = Mlp::new(flat, rng);
        let heads = Heads::new(mlp.out_dim(), cfg, rng);
        Ok(CnnNet {
            source,
            objective,
            steps: CNN_STEPS,
            blocks,
            mlp,
            heads,
        })
    }

    fn forward(&self, batch: &Batch, modality: Modality, batch_stats: bool) -> Result<CnnTrace> {
        if !self.source.supports(modality) {
            return Err(Error::Config(format!(
                "{:?}-input CNN cannot be evaluated as {}",
                self.source,
                modality.name()
            )));
        }
        let seqs = match self.source {
            Source::Audio => batch.audio()?,
            _ => &batch.video,
        };
        let fitted: Vec<Matrix> = seqs.iter().map(|s| fit_length(s, self.steps)).collect();
        let first = self.blocks[0].forward(&fitted.iter().collect::<Vec<_>>(), batch_stats)?;
        let mid = split_rows(&first.output, &first.lengths);
        let second = self.blocks[1].forward(&mid.iter().collect::<Vec<_>>(), batch_stats)?;
        let per_clip = second.lengths[0] * second.output.cols();
        let flat = Matrix::from_vec(batch.len(), per_clip, second.output.data().to_vec())?;
        let acts = self.mlp.forward(flat)?;
        Ok(CnnTrace {
            blocks: vec![first, second],
            acts,
        })
    }

    pub fn evaluate(&self, batch: &Batch, modality: Modality) -> Result<Evaluation> {
        let t = self.forward(batch, modality, false)?;
        let (cls_probs, sev_probs) = self.heads.forward(t.acts.last().expect("non-empty"))?;
        let losses = Heads::losses(&cls_probs, &sev_probs, batch, &self.objective)?;
        Ok(Evaluation {
            cls_probs,
            sev_probs,
            losses,
        })
    }

    pub fn loss_and_grad(&self, batch: &Batch) -> Result<(LossBreakdown, CnnNet, Vec<RefinerTrace>)> {
        let t = self.forward(batch, Modality::Both, true)?;
        let h = t.acts.last().expect("non-empty");
        let (cls, sev) = self.heads.forward(h)?;
        let losses = Heads::losses(&cls, &sev, batch, &self.objective)?;
        let mut grad = self.clone();
        grad.zero_all();
        let dh = self.heads.backward(h, &cls, &sev, batch, &self.objective, &mut grad.heads);
        let dflat = self.mlp.backward(&t.acts, dh, &mut grad.mlp);
        let d_second = Matrix::from_vec(t.blocks[1].output.rows(), t.blocks[1].output.cols(), dflat.into_vec())?;
        let d_mid = self.blocks[1].backward_with_input(&t.blocks[1], &d_second, &mut grad.blocks[1]);
        let d_first = Matrix::vcat(&d_mid.iter().collect::<Vec<_>>())?;
        self.blocks[0].backward(&t.blocks[0], &d_first, &mut grad.blocks[0]);
        Ok((losses, grad, t.blocks))
    }
}

fn split_rows(m: &Matrix, lengths: &[usize]) -> Vec<Matrix> {
    let mut out = Vec::with_capacity(lengths.len());
    let mut start = 0;
    for &len in lengths {
        out.push(m.slice_rows(start, start + len));
        start += len;
    }
    out
}

impl Params for CnnNet {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Slot<'a>>) {
        self.blocks.collect(&join(prefix, "blocks"), out);
        self.mlp.collect(prefix, out);
        self.heads.collect(prefix, out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a>>) {
        self.blocks.collect_mut(&join(prefix, "blocks"), out);
        self.mlp.collect_mut(prefix, out);
        self.heads.collect_mut(prefix, out);
    }
}

/// Refine each modality, pool, concatenate, one dense layer to `d_s`, heads.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatFusion {
    pub objective: Objective,
    pub video: Refiner,
    pub audio: Refiner,
    pub fuse: Dense,
    pub heads: Heads,
}

struct FlatTrace {
    video: Option<RefinerTrace>,
    audio: Option<RefinerTrace>,
    pooled: Matrix,
    h: Matrix,
}

impl FlatFusion {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, objective: Objective, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        objective.validate()?;
        let video = Refiner::new(cfg.d_v, cfg.d_refined, rng)?;
        let audio = Refiner::new(cfg.d_a, cfg.d_refined, rng)?;
        let fuse = Dense::glorot(2 * cfg.d_refined, cfg.d_shared, rng);
        let heads = Heads::new(cfg.d_shared, cfg, rng);
        Ok(FlatFusion {
            objective,
            video,
            audio,
            fuse,
            heads,
        })
    }

    fn forward(&self, batch: &Batch, modality: Modality, batch_stats: bool) -> Result<FlatTrace> {
        let n = batch.len();
        let d = self.video.out_dim();
        let video = if modality.uses_video() {
            Some(self.video.forward(&batch.video, batch_stats)?)
        } else {
            None
        };
        let audio = if modality.uses_audio() {
            Some(self.audio.forward(batch.audio()?, batch_stats)?)
        } else {
            None
        };
        let pool = |t: &Option<RefinerTrace>| t.as_ref().map_or_else(|| Matrix::zeros(n, d), |t| gap(&t.output, &t.lengths));
        let pooled = Matrix::hcat(&pool(&video), &pool(&audio))?;
        let h = Activation::Relu.apply_rows(&self.fuse.forward(&pooled)?);
        Ok(FlatTrace { video, audio, pooled, h })
    }

    pub fn evaluate(&self, batch: &Batch, modality: Modality) -> Result<Evaluation> {
        let t = self.forward(batch, modality, false)?;
        let (cls_probs, sev_probs) = self.heads.forward(&t.h)?;
        let losses = Heads::losses(&cls_probs, &sev_probs, batch, &self.objective)?;
        Ok(Evaluation {
            cls_probs,
            sev_probs,
            losses,
        })
    }

    pub fn loss_and_grad(&self, batch: &Batch) -> Result<(LossBreakdown, FlatFusion, [Option<RefinerTrace>; 2])> {
        let t = self.forward(batch, Modality::Both, true)?;
        let (cls, sev) = self.heads.forward(&t.h)?;
        let losses = Heads::losses(&cls, &sev, batch, &self.objective)?;
        let mut grad = self.clone();
        grad.zero_all();
        let dh = self.heads.backward(&t.h, &cls, &sev, batch, &self.objective, &mut grad.heads);
        let dpre = Activation::Relu.backward_rows(&t.h, &dh);
        let dpooled = self.fuse.backward(&t.pooled, &dpre, &mut grad.fuse);
        let d = self.video.out_dim();
        if let Some(v) = &t.video {
            let du = gap_backward(&dpooled.slice_cols(0, d), &v.lengths);
            self.video.backward(v, &du, &mut grad.video);
        }
        if let Some(a) = &t.audio {
            let du = gap_backward(&dpooled.slice_cols(d, 2 * d), &a.lengths);
            self.audio.backward(a, &du, &mut grad.audio);
        }
        Ok((losses, grad, [t.video, t.audio]))
    }
}

impl Params for FlatFusion {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Slot<'a>>) {
        self.video.collect(&join(prefix, "video.refiner"), out);
        self.audio.collect(&join(prefix, "audio.refiner"), out);
        self.fuse.collect(&join(prefix, "fuse"), out);
        self.heads.collect(prefix, out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a>>) {
        self.video.collect_mut(&join(prefix, "video.refiner"), out);
        self.audio.collect_mut(&join(prefix, "audio.refiner"), out);
        self.fuse.collect_mut(&join(prefix, "fuse"), out);
        self.heads.collect_mut(prefix, out);
    }
}

//! The DIVINE graph: temporal refinement, window VAE, utterance VAE with a
//! weight-tied shared encoder, cross-modal cycle decoders, sparse gated
//! fusion, symptom tokens and the diagnosis/severity heads.

use rand::Rng;
use rand_distr::StandardNormal;

use super::batch::Batch;
use super::config::{CycleMode, Modality, ModelConfig, Objective};
use super::loss::LossBreakdown;
use super::refiner::{Refiner, RefinerTrace};
use crate::error::{Error, Result};
use crate::numerics::layers::{glorot_bound, sigmoid};
use crate::numerics::loss::softmax_xent_logit_grad;
use crate::numerics::params::{join, push_matrix, push_matrix_mut, Params, Slot, SlotMut};
use crate::numerics::{cross_entropy_batch, gaussian_kl, softmax_rows, Dense, Matrix};

/// Added to squared norms inside the token cosine so it stays smooth at 0.
pub const COS_SMOOTHING: f64 = 1e-12;
/// Scale applied to the log-variance rows of freshly initialized encoders.
const LOGVAR_INIT_SCALE: f64 = 0.1;

/// Per-modality parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub refiner: Refiner,
    pub window_enc: Option<Dense>,
    pub window_dec: Option<Dense>,
    pub private_enc: Dense,
    pub utter_dec: Dense,
    pub gate: Dense,
}

/// Dense map producing `[μ | logσ²]` with small initial log-variances.
pub(crate) fn gaussian_head<R: Rng + ?Sized>(in_dim: usize, latent: usize, rng: &mut R) -> Dense {
    let mut d = Dense::glorot(in_dim, 2 * latent, rng);
    for r in latent..2 * latent {
        for v in d.weight.row_mut(r) {
            *v *= LOGVAR_INIT_SCALE;
        }
    }
    d
}

impl Branch {
    fn new<R: Rng + ?Sized>(d_in: usize, cfg: &ModelConfig, window_vae: bool, rng: &mut R) -> Result<Self> {
        let refiner = Refiner::new(d_in, cfg.d_refined, rng)?;
        let d_u = if window_vae { cfg.d_window } else { cfg.d_refined };
        let (window_enc, window_dec) = if window_vae {
            (
                Some(gaussian_head(cfg.d_refined, cfg.d_window, rng)),
                Some(Dense::glorot(cfg.d_window, cfg.d_refined, rng)),
            )
        } else {
            (None, None)
        };
        Ok(Branch {
            refiner,
            window_enc,
            window_dec,
            private_enc: gaussian_head(d_u, cfg.d_private, rng),
            utter_dec: Dense::glorot(cfg.d_shared + cfg.d_private, d_u, rng),
            gate: Dense::glorot(cfg.d_private, cfg.d_shared, rng),
        })
    }
}

impl Params for Branch {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Slot<'a>>) {
        self.refiner.collect(&join(prefix, "refiner"), out);
        if let Some(d) = &self.window_enc {
            d.collect(&join(prefix, "window_enc"), out);
        }
        if let Some(d) = &self.window_dec {
            d.collect(&join(prefix, "window_dec"), out);
        }
        self.private_enc.collect(&join(prefix, "private_enc"), out);
        self.utter_dec.collect(&join(prefix, "utter_dec"), out);
        self.gate.collect(&join(prefix, "gate"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a>>) {
        self.refiner.collect_mut(&join(prefix, "refiner"), out);
        if let Some(d) = &mut self.window_enc {
            d.collect_mut(&join(prefix, "window_enc"), out);
        }
        if let Some(d) = &mut self.window_dec {
            d.collect_mut(&join(prefix, "window_dec"), out);
        }
        self.private_enc.collect_mut(&join(prefix, "private_enc"), out);
        self.utter_dec.collect_mut(&join(prefix, "utter_dec"), out);
        self.gate.collect_mut(&join(prefix, "gate"), out);
    }
}

/// All trainable tensors of the graph. The shared utterance encoder exists
/// once and serves both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct Divine {
    pub config: ModelConfig,
    pub objective: Objective,
    /// `false` gives the single-level variant: no window VAE, pooling runs
    /// directly over the refined sequence.
    pub window_vae: bool,
    pub video: Branch,
    pub audio: Branch,
    pub shared_enc: Dense,
    /// `D_a`: shared video latent → shared audio latent.
    pub to_audio: Dense,
    /// `D_v`: shared audio latent → shared video latent.
    pub to_video: Dense,
    /// `K × d_s` symptom tokens.
    pub tokens: Matrix,
    pub token_dense: Dense,
    pub cls_head: Dense,
    pub sev_head: Dense,
}

/// Standard-normal draws for one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchNoise {
    /// One row per pooled step of every clip; absent without a window VAE.
    pub window: Option<Matrix>,
    pub shared: Matrix,
    pub private: Matrix,
}

/// Every random quantity of a training forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub video: Option<BranchNoise>,
    pub audio: Option<BranchNoise>,
    /// Inverted-dropout mask on the fused latent (`0` or `1/(1-p)`).
    pub dropout: Option<Matrix>,
}

pub(crate) fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape matches length")
}

pub(crate) fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Matrix {
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape matches length")
}

impl Noise {
    pub fn sample<R: Rng + ?Sized>(
        model: &Divine,
        batch: &Batch,
        modality: Modality,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Noise> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {dropout}")));
        }
        let cfg = &model.config;
        let n = batch.len();
        let branch = |seqs: &[&Matrix], rng: &mut R| BranchNoise {
            window: model
                .window_vae
                .then(|| randn(seqs.iter().map(|s| s.rows() / 2).sum(), cfg.d_window, rng)),
            shared: randn(n, cfg.d_shared, rng),
            private: randn(n, cfg.d_private, rng),
        };
        let video = modality.uses_video().then(|| branch(&batch.video, rng));
        let audio = if modality.uses_audio() {
            Some(branch(batch.audio()?, rng))
        } else {
            None
        };
        let dropout = (dropout > 0.0).then(|| dropout_mask(n, cfg.d_shared, dropout, rng));
        Ok(Noise { video, audio, dropout })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardMode {
    /// Batch statistics in batch normalization (training) instead of the
    /// running estimates.
    pub batch_stats: bool,
    pub modality: Modality,
}

impl ForwardMode {
    pub fn train() -> Self {
        ForwardMode {
            batch_stats: true,
            modality: Modality::Both,
        }
    }

    pub fn eval(modality: Modality) -> Self {
        ForwardMode {
            batch_stats: false,
            modality,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WindowTrace {
    pub mu: Matrix,
    pub logvar: Matrix,
    pub z: Matrix,
    pub recon: Matrix,
}

#[derive(Debug, Clone)]
pub struct BranchTrace {
    pub refiner: RefinerTrace,
    pub window: Option<WindowTrace>,
    /// Pooled utterance input `z̄` (`B × d_u`).
    pub z_bar: Matrix,
    pub mu_s: Matrix,
    pub logvar_s: Matrix,
    pub z_s: Matrix,
    pub mu_p: Matrix,
    pub logvar_p: Matrix,
    pub z_p: Matrix,
    pub dec_in: Matrix,
    pub recon: Matrix,
}

impl BranchTrace {
    pub fn lengths(&self) -> &[usize] {
        &self.refiner.lengths
    }
}

/// Every intermediate of a forward pass, including the noise that was used.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub modality: Modality,
    pub noise: Option<Noise>,
    pub video: Option<BranchTrace>,
    pub audio: Option<BranchTrace>,
    /// Shared latents entering fusion, after missing-modality substitution.
    pub z_s_video: Matrix,
    pub z_s_audio: Matrix,
    /// Private latents entering the gates (zero for a missing modality).
    pub z_p_video: Matrix,
    pub z_p_audio: Matrix,
    /// `D_a(z_s^v)`.
    pub to_audio: Option<Matrix>,
    /// `D_v(z_s^a)`.
    pub to_video: Option<Matrix>,
    pub gate_video: Matrix,
    pub gate_audio: Matrix,
    pub h_fused: Matrix,
    /// Fused latent after dropout, the last row of every token stack.
    pub h_in: Matrix,
    /// Dense outputs of the token rows (`K × d_s`).
    pub token_out: Matrix,
    /// Dense output of the fused row; input to both heads.
    pub h: Matrix,
    pub cls_probs: Matrix,
    pub sev_probs: Matrix,
}

fn split_gaussian(enc: &Matrix, latent: usize) -> (Matrix, Matrix) {
    (enc.slice_cols(0, latent), enc.slice_cols(latent, 2 * latent))
}

fn sample(mu: &Matrix, logvar: &Matrix, eps: Option<&Matrix>) -> Matrix {
    match eps {
        None => mu.clone(),
        Some(eps) => {
            let mut z = logvar.zip_map(eps, |lv, e| (0.5 * lv).exp() * e);
            z.add_scaled(mu, 1.0);
            z
        }
    }
}

fn kl_rows(mu: &Matrix, logvar: &Matrix) -> Vec<f64> {
    mu.row_iter().zip(logvar.row_iter()).map(|(m, l)| gaussian_kl(m, l)).collect()
}

/// Gradient wrt `[μ | logσ²]` of `dz` through the reparameterization plus
/// `weights[r] · KL(row r)`.
fn gaussian_backward(mu: &Matrix, logvar: &Matrix, eps: Option<&Matrix>, dz: &Matrix, weights: &[f64]) -> Matrix {
    let l = mu.cols();
    let mut out = Matrix::zeros(mu.rows(), 2 * l);
    for r in 0..mu.rows() {
        let w = weights[r];
        for c in 0..l {
            let (m, lv) = (mu[(r, c)], logvar[(r, c)]);
            let g = dz[(r, c)];
            out[(r, c)] = g + w * m;
            let mut dlv = w * 0.5 * (lv.exp() - 1.0);
            if let Some(eps) = eps {
                dlv += g * eps[(r, c)] * 0.5 * (0.5 * lv).exp();
            }
            out[(r, l + c)] = dlv;
        }
    }
    out
}

/// Mean over the steps of every clip in a stacked sequence.
pub(crate) fn gap(z: &Matrix, lengths: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(lengths.len(), z.cols());
    let mut start = 0;
    for (b, &len) in lengths.iter().enumerate() {
        let row = out.row_mut(b);
        for t in start..start + len {
            for (o, &v) in row.iter_mut().zip(z.row(t)) {
                *o += v;
            }
        }
        for o in row.iter_mut() {
            *o /= len as f64;
        }
        start += len;
    }
    out
}

pub(crate) fn gap_backward(d: &Matrix, lengths: &[usize]) -> Matrix {
    let total = lengths.iter().sum();
    let mut out = Matrix::zeros(total, d.cols());
    let mut start = 0;
    for (b, &len) in lengths.iter().enumerate() {
        for t in start..start + len {
            for (o, &v) in out.row_mut(t).iter_mut().zip(d.row(b)) {
                *o = v / len as f64;
            }
        }
        start += len;
    }
    out
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    a.zip_map(b, |x, y| x * y)
}

fn row_sq_norms(a: &Matrix, b: &Matrix) -> Vec<f64> {
    a.row_iter()
        .zip(b.row_iter())
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum())
        .collect()
}

fn mean_rows(m: &Matrix) -> Vec<f64> {
    let mut s = m.col_sums();
    for v in &mut s {
        *v /= m.rows() as f64;
    }
    s
}

fn smoothed_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = (a.iter().map(|x| x * x).sum::<f64>() + COS_SMOOTHING).sqrt();
    let nb = (b.iter().map(|x| x * x).sum::<f64>() + COS_SMOOTHING).sqrt();
    dot / (na * nb)
}

/// `‖mean_k H_k − h_fused‖²` averaged over the batch, plus the mean squared
/// pairwise cosine between token outputs.
pub fn token_loss(token_out: &Matrix, h_fused: &Matrix) -> f64 {
    let m = mean_rows(token_out);
    let recon = h_fused
        .row_iter()
        .map(|h| h.iter().zip(&m).map(|(a, b)| (b - a) * (b - a)).sum::<f64>())
        .sum::<f64>()
        / h_fused.rows() as f64;
    let k = token_out.rows();
    let mut decor = 0.0;
    if k > 1 {
        for i in 0..k {
            for j in i + 1..k {
                decor += smoothed_cos(token_out.row(i), token_out.row(j)).powi(2);
            }
        }
        decor *= 2.0 / (k * (k - 1)) as f64;
    }
    recon + decor
}

impl Divine {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, objective: Objective, rng: &mut R) -> Result<Self> {
        Divine::build(config, objective, true, rng)
    }

    pub fn single_level<R: Rng + ?Sized>(config: ModelConfig, objective: Objective, rng: &mut R) -> Result<Self> {
        Divine::build(config, objective, false, rng)
    }

    fn build<R: Rng + ?Sized>(config: ModelConfig, objective: Objective, window_vae: bool, rng: &mut R) -> Result<Self> {
        config.validate()?;
        objective.validate()?;
        let c = &config;
        let d_u = if window_vae { c.d_window } else { c.d_refined };
        let video = Branch::new(c.d_v, c, window_vae, rng)?;
        let audio = Branch::new(c.d_a, c, window_vae, rng)?;
        let shared_enc = gaussian_head(d_u, c.d_shared, rng);
        let to_audio = Dense::glorot(c.d_shared, c.d_shared, rng);
        let to_video = Dense::glorot(c.d_shared, c.d_shared, rng);
        let bound = glorot_bound(c.n_tokens, c.d_shared);
        let tokens = Matrix::from_vec(
            c.n_tokens,
            c.d_shared,
            (0..c.n_tokens * c.d_shared).map(|_| rng.random_range(-bound..bound)).collect(),
        )?;
        Ok(Divine {
            video,
            audio,
            shared_enc,
            to_audio,
            to_video,
            tokens,
            token_dense: Dense::glorot(c.d_shared, c.d_shared, rng),
            cls_head: Dense::glorot(c.d_shared, c.n_classes, rng),
            sev_head: Dense::glorot(c.d_shared, c.n_severity, rng),
            window_vae,
            objective,
            config,
        })
    }

    /// Zeroed copy with the same structure, used as a gradient buffer.
    pub fn zeros_like(&self) -> Divine {
        let mut g = self.clone();
        g.zero_all();
        g
    }

    fn branch_forward(&self, br: &Branch, xs: &[&Matrix], batch_stats: bool, noise: Option<&BranchNoise>) -> Result<BranchTrace> {
        let cfg = &self.config;
        let refiner = br.refiner.forward(xs, batch_stats)?;
        let window = match (&br.window_enc, &br.window_dec) {
            (Some(enc), Some(dec)) => {
                let (mu, logvar) = split_gaussian(&enc.forward(&refiner.output)?, cfg.d_window);
                let eps = noise.and_then(|n| n.window.as_ref());
                if let Some(e) = eps {
                    if e.shape() != mu.shape() {
                        return Err(Error::dim("window noise", format!("{:?}", mu.shape()), format!("{:?}", e.shape())));
                    }
                }
                let z = sample(&mu, &logvar, eps);
                let recon = dec.forward(&z)?;
                Some(WindowTrace { mu, logvar, z, recon })
            }
            _ => None,
        };
        let z_sig = window.as_ref().map_or(&refiner.output, |w| &w.z);
        let z_bar = gap(z_sig, &refiner.lengths);
        let (mu_s, logvar_s) = split_gaussian(&self.shared_enc.forward(&z_bar)?, cfg.d_shared);
        let (mu_p, logvar_p) = split_gaussian(&br.private_enc.forward(&z_bar)?, cfg.d_private);
        let z_s = sample(&mu_s, &logvar_s, noise.map(|n| &n.shared));
        let z_p = sample(&mu_p, &logvar_p, noise.map(|n| &n.private));
        let dec_in = Matrix::hcat(&z_s, &z_p)?;
        let recon = br.utter_dec.forward(&dec_in)?;
        Ok(BranchTrace {
            refiner,
            window,
            z_bar,
            mu_s,
            logvar_s,
            z_s,
            mu_p,
            logvar_p,
            z_p,
            dec_in,
            recon,
        })
    }

    /// Runs the graph. `noise = None` is evaluation: every latent takes its
    /// posterior mean and dropout is off.
    pub fn forward(&self, batch: &Batch, mode: ForwardMode, noise: Option<&Noise>) -> Result<(ForwardTrace, LossBreakdown)> {
        let cfg = &self.config;
        let modality = mode.modality;
        if modality == Modality::AudioOnly && cfg.cycle == CycleMode::Asymmetric && cfg.strict {
            return Err(Error::Unsupported(
                "audio-only inference needs the audio→video decoder (symmetric cycle mode)".into(),
            ));
        }
        let n = batch.len();
        let video = if modality.uses_video() {
            Some(self.branch_forward(&self.video, &batch.video, mode.batch_stats, noise.and_then(|z| z.video.as_ref()))?)
        } else {
            None
        };
        let audio = if modality.uses_audio() {
            Some(self.branch_forward(&self.audio, batch.audio()?, mode.batch_stats, noise.and_then(|z| z.audio.as_ref()))?)
        } else {
            None
        };
        let symmetric = cfg.cycle == CycleMode::Symmetric;
        let to_audio = match &video {
            Some(v) => Some(self.to_audio.forward(&v.z_s)?),
            None => None,
        };
        let to_video = match &audio {
            Some(a) if symmetric => Some(self.to_video.forward(&a.z_s)?),
            _ => None,
        };
        let zero_p = || Matrix::zeros(n, cfg.d_private);
        let (z_s_video, z_s_audio, z_p_video, z_p_audio) = match (&video, &audio) {
            (Some(v), Some(a)) => (v.z_s.clone(), a.z_s.clone(), v.z_p.clone(), a.z_p.clone()),
            (Some(v), None) => (v.z_s.clone(), to_audio.clone().expect("video present"), v.z_p.clone(), zero_p()),
            (None, Some(a)) => {
                let zv = if symmetric { to_video.clone().expect("symmetric") } else { a.z_s.clone() };
                (zv, a.z_s.clone(), zero_p(), a.z_p.clone())
            }
            (None, None) => unreachable!("every modality uses at least one branch"),
        };
        let gates = |gate: &Dense, z_p: &Matrix| -> Result<Matrix> {
            if self.objective.sparse_gating {
                Ok(gate.forward(z_p)?.map(sigmoid))
            } else {
                Ok(Matrix::filled(n, cfg.d_shared, 1.0))
            }
        };
        let gate_video = gates(&self.video.gate, &z_p_video)?;
        let gate_audio = gates(&self.audio.gate, &z_p_audio)?;
        let mut h_fused = hadamard(&gate_video, &z_s_video);
        h_fused.add_scaled(&hadamard(&gate_audio, &z_s_audio), 1.0);
        let h_in = match noise.and_then(|z| z.dropout.as_ref()) {
            Some(mask) => hadamard(&h_fused, mask),
            None => h_fused.clone(),
        };
        let token_out = self.token_dense.forward(&self.tokens)?;
        let h = self.token_dense.forward(&h_in)?;
        let cls_probs = softmax_rows(&self.cls_head.forward(&h)?);
        let sev_probs = softmax_rows(&self.sev_head.forward(&h)?);

        let trace = ForwardTrace {
            modality,
            noise: noise.cloned(),
            video,
            audio,
            z_s_video,
            z_s_audio,
            z_p_video,
            z_p_audio,
            to_audio,
            to_video,
            gate_video,
            gate_audio,
            h_fused,
            h_in,
            token_out,
            h,
            cls_probs,
            sev_probs,
        };
        let losses = self.losses(batch, &trace)?;
        Ok((trace, losses))
    }

    fn window_row_weights(lengths: &[usize]) -> Vec<f64> {
        let b = lengths.len() as f64;
        lengths
            .iter()
            .flat_map(|&len| std::iter::repeat(1.0 / (b * len as f64)).take(len))
            .collect()
    }

    fn branch_losses(&self, t: &BranchTrace) -> (f64, f64) {
        let cfg = &self.config;
        let window = t.window.as_ref().map_or(0.0, |w| {
            let weights = Self::window_row_weights(t.lengths());
            let rec = row_sq_norms(&t.refiner.output, &w.recon);
            let kl = kl_rows(&w.mu, &w.logvar);
            weights.iter().zip(rec).zip(kl).map(|((w, r), k)| w * (r + k)).sum()
        });
        let rec = row_sq_norms(&t.z_bar, &t.recon);
        let kl_s = kl_rows(&t.mu_s, &t.logvar_s);
        let kl_p = kl_rows(&t.mu_p, &t.logvar_p);
        let utter = rec
            .iter()
            .zip(&kl_s)
            .zip(&kl_p)
            .map(|((r, s), p)| r + cfg.beta_shared * s + cfg.beta_private * p)
            .sum::<f64>()
            / rec.len() as f64;
        (window, utter)
    }

    /// Component losses of a trace; reconstruction terms of a missing
    /// modality and the cycle term without both modalities are zero.
    pub fn losses(&self, batch: &Batch, trace: &ForwardTrace) -> Result<LossBreakdown> {
        let n = batch.len() as f64;
        let mut l = LossBreakdown {
            cls: cross_entropy_batch(&trace.cls_probs, &batch.diagnosis)?,
            sev: cross_entropy_batch(&trace.sev_probs, &batch.severity)?,
            ..Default::default()
        };
        if let Some(v) = &trace.video {
            (l.window_video, l.utter_video) = self.branch_losses(v);
        }
        if let Some(a) = &trace.audio {
            (l.window_audio, l.utter_audio) = self.branch_losses(a);
        }
        if let (Some(v), Some(a)) = (&trace.video, &trace.audio) {
            let to_audio = trace.to_audio.as_ref().expect("both present");
            l.cycle = row_sq_norms(to_audio, &a.z_s).iter().sum::<f64>() / n;
            if let Some(to_video) = &trace.to_video {
                l.cycle += row_sq_norms(to_video, &v.z_s).iter().sum::<f64>() / n;
            }
        }
        if self.objective.sparse_gating {
            let total: f64 = trace.gate_video.data().iter().chain(trace.gate_audio.data()).sum();
            l.sparse = total / (n * self.config.d_shared as f64);
        }
        l.token = token_loss(&trace.token_out, &trace.h_fused);
        l.finalize(&self.objective)
    }

    /// Accumulates the gradient of `trace`'s total loss into `grad`.
    pub fn backward(&self, batch: &Batch, trace: &ForwardTrace, grad: &mut Divine) -> Result<()> {
        let [dzs_v, dzp_v, dzs_a, dzp_a] = self.backward_to_latents(batch, trace, grad);
        let noise = trace.noise.as_ref();
        if let Some(t) = &trace.video {
            let bn = noise.and_then(|z| z.video.as_ref());
            self.branch_backward(&self.video, t, bn, dzs_v, dzp_v, &mut grad.video, &mut grad.shared_enc);
        }
        if let Some(t) = &trace.audio {
            let bn = noise.and_then(|z| z.audio.as_ref());
            self.branch_backward(&self.audio, t, bn, dzs_a, dzp_a, &mut grad.audio, &mut grad.shared_enc);
        }
        Ok(())
    }

    /// Heads, tokens, fusion and cycle; returns the gradients reaching the
    /// sampled latents `[z_s^v, z_p^v, z_s^a, z_p^a]`.
    fn backward_to_latents(&self, batch: &Batch, trace: &ForwardTrace, grad: &mut Divine) -> [Matrix; 4] {
        let o = &self.objective;
        let cfg = &self.config;
        let n = batch.len();
        let nf = n as f64;
        let ds = cfg.d_shared;

        let mut dh = Matrix::zeros(n, ds);
        for (w, probs, labels, head, ghead) in [
            (o.cls_weight(), &trace.cls_probs, &batch.diagnosis, &self.cls_head, &mut grad.cls_head),
            (o.sev_weight(), &trace.sev_probs, &batch.severity, &self.sev_head, &mut grad.sev_head),
        ] {
            if w > 0.0 {
                let mut dlogits = softmax_xent_logit_grad(probs, labels);
                dlogits.scale(w);
                dh.add_scaled(&head.backward(&trace.h, &dlogits, ghead), 1.0);
            }
        }

        let mut dh_fused = Matrix::zeros(n, ds);
        let mut d_token_out = Matrix::zeros(cfg.n_tokens, ds);
        let c_tok = o.token_weight();
        if c_tok > 0.0 {
            let k = cfg.n_tokens;
            let m = mean_rows(&trace.token_out);
            let mut sum_r = vec![0.0; ds];
            for b in 0..n {
                let hf = trace.h_fused.row(b);
                let dst = dh_fused.row_mut(b);
                for c in 0..ds {
                    let r = m[c] - hf[c];
                    sum_r[c] += r;
                    dst[c] -= c_tok * 2.0 / nf * r;
                }
            }
            for row in 0..k {
                for (d, s) in d_token_out.row_mut(row).iter_mut().zip(&sum_r) {
                    *d += c_tok * 2.0 / nf * s / k as f64;
                }
            }
            if k > 1 {
                let q = c_tok * 2.0 / (k * (k - 1)) as f64;
                let h = &trace.token_out;
                let n2: Vec<f64> = h.row_iter().map(|r| r.iter().map(|x| x * x).sum::<f64>() + COS_SMOOTHING).collect();
                for i in 0..k {
                    for j in i + 1..k {
                        let (hi, hj) = (h.row(i).to_vec(), h.row(j).to_vec());
                        let dot: f64 = hi.iter().zip(&hj).map(|(a, b)| a * b).sum();
                        let nn = (n2[i] * n2[j]).sqrt();
                        let cos = dot / nn;
                        let coef = q * 2.0 * cos;
                        for c in 0..ds {
                            d_token_out[(i, c)] += coef * (hj[c] / nn - cos * hi[c] / n2[i]);
                            d_token_out[(j, c)] += coef * (hi[c] / nn - cos * hj[c] / n2[j]);
                        }
                    }
                }
            }
        }
        let dh_in = self.token_dense.backward(&trace.h_in, &dh, &mut grad.token_dense);
        let d_tokens = self.token_dense.backward(&self.tokens, &d_token_out, &mut grad.token_dense);
        grad.tokens.add_scaled(&d_tokens, 1.0);
        match trace.noise.as_ref().and_then(|z| z.dropout.as_ref()) {
            Some(mask) => dh_fused.add_scaled(&hadamard(&dh_in, mask), 1.0),
            None => dh_fused.add_scaled(&dh_in, 1.0),
        }

        let mut dzs_v = hadamard(&dh_fused, &trace.gate_video);
        let mut dzs_a = hadamard(&dh_fused, &trace.gate_audio);
        let mut dzp_v = Matrix::zeros(n, cfg.d_private);
        let mut dzp_a = Matrix::zeros(n, cfg.d_private);
        if o.sparse_gating {
            let c_sp = o.sparse_weight() / (nf * ds as f64);
            for (g, zs, zp, gate, ggate, dzp) in [
                (&trace.gate_video, &trace.z_s_video, &trace.z_p_video, &self.video.gate, &mut grad.video.gate, &mut dzp_v),
                (&trace.gate_audio, &trace.z_s_audio, &trace.z_p_audio, &self.audio.gate, &mut grad.audio.gate, &mut dzp_a),
            ] {
                let mut dpre = Matrix::zeros(n, ds);
                for r in 0..n {
                    for c in 0..ds {
                        let gv = g[(r, c)];
                        dpre[(r, c)] = (dh_fused[(r, c)] * zs[(r, c)] + c_sp) * gv * (1.0 - gv);
                    }
                }
                *dzp = gate.backward(zp, &dpre, ggate);
            }
        }

        let c_cyc = o.cycle_weight();
        if let (Some(v), Some(a)) = (&trace.video, &trace.audio) {
            if c_cyc > 0.0 {
                let mut e = trace.to_audio.clone().expect("both present");
                e.add_scaled(&a.z_s, -1.0);
                e.scale(2.0 * c_cyc / nf);
                dzs_v.add_scaled(&self.to_audio.backward(&v.z_s, &e, &mut grad.to_audio), 1.0);
                dzs_a.add_scaled(&e, -1.0);
                if let Some(to_video) = &trace.to_video {
                    let mut e = to_video.clone();
                    e.add_scaled(&v.z_s, -1.0);
                    e.scale(2.0 * c_cyc / nf);
                    dzs_a.add_scaled(&self.to_video.backward(&a.z_s, &e, &mut grad.to_video), 1.0);
                    dzs_v.add_scaled(&e, -1.0);
                }
            }
        }
        match (&trace.video, &trace.audio) {
            (Some(v), None) => {
                dzs_v.add_scaled(&self.to_audio.backward(&v.z_s, &dzs_a, &mut grad.to_audio), 1.0);
            }
            (None, Some(a)) => {
                if cfg.cycle == CycleMode::Symmetric {
                    dzs_a.add_scaled(&self.to_video.backward(&a.z_s, &dzs_v, &mut grad.to_video), 1.0);
                } else {
                    dzs_a.add_scaled(&dzs_v, 1.0);
                }
            }
            _ => {}
        }
        [dzs_v, dzp_v, dzs_a, dzp_a]
    }

    #[allow(clippy::too_many_arguments)]
    fn branch_backward(
        &self,
        br: &Branch,
        t: &BranchTrace,
        noise: Option<&BranchNoise>,
        mut dz_s: Matrix,
        mut dz_p: Matrix,
        grad: &mut Branch,
        grad_shared: &mut Dense,
    ) {
        let cfg = &self.config;
        let n = t.z_bar.rows();
        let nf = n as f64;
        let mut e = t.z_bar.clone();
        e.add_scaled(&t.recon, -1.0);
        let mut dz_bar = e.clone();
        dz_bar.scale(2.0 / nf);
        e.scale(-2.0 / nf);
        let d_dec_in = br.utter_dec.backward(&t.dec_in, &e, &mut grad.utter_dec);
        dz_s.add_scaled(&d_dec_in.slice_cols(0, cfg.d_shared), 1.0);
        dz_p.add_scaled(&d_dec_in.slice_cols(cfg.d_shared, cfg.d_shared + cfg.d_private), 1.0);

        let d_shared = gaussian_backward(
            &t.mu_s,
            &t.logvar_s,
            noise.map(|z| &z.shared),
            &dz_s,
            &vec![cfg.beta_shared / nf; n],
        );
        dz_bar.add_scaled(&self.shared_enc.backward(&t.z_bar, &d_shared, grad_shared), 1.0);
        let d_private = gaussian_backward(
            &t.mu_p,
            &t.logvar_p,
            noise.map(|z| &z.private),
            &dz_p,
            &vec![cfg.beta_private / nf; n],
        );
        dz_bar.add_scaled(&br.private_enc.backward(&t.z_bar, &d_private, &mut grad.private_enc), 1.0);

        let dz_sig = gap_backward(&dz_bar, t.lengths());
        let d_refined = match (&t.window, &br.window_enc, &br.window_dec) {
            (Some(w), Some(enc), Some(dec)) => {
                let weights = Self::window_row_weights(t.lengths());
                let mut e = t.refiner.output.clone();
                e.add_scaled(&w.recon, -1.0);
                for (r, &wt) in weights.iter().enumerate() {
                    for v in e.row_mut(r) {
                        *v *= 2.0 * wt;
                    }
                }
                let mut d_recon = e.clone();
                d_recon.scale(-1.0);
                let mut dz = dz_sig;
                dz.add_scaled(&dec.backward(&w.z, &d_recon, grad.window_dec.as_mut().expect("same structure")), 1.0);
                let d_enc = gaussian_backward(&w.mu, &w.logvar, noise.and_then(|z| z.window.as_ref()), &dz, &weights);
                let mut du = e;
                du.add_scaled(&enc.backward(&t.refiner.output, &d_enc, grad.window_enc.as_mut().expect("same structure")), 1.0);
                du
            }
            _ => dz_sig,
        };
        br.refiner.backward(&t.refiner, &d_refined, &mut grad.refiner);
    }

    /// Forward plus backward into a fresh gradient buffer.
    pub fn loss_and_grad(&self, batch: &Batch, mode: ForwardMode, noise: Option<&Noise>) -> Result<(ForwardTrace, LossBreakdown, Divine)> {
        let (trace, losses) = self.forward(batch, mode, noise)?;
        let mut grad = self.zeros_like();
        self.backward(batch, &trace, &mut grad)?;
        Ok((trace, losses, grad))
    }

    /// Folds the batch statistics of a training pass into the running
    /// batch-norm estimates.
    pub fn apply_batch_stats(&mut self, trace: &ForwardTrace) {
        if let Some(t) = &trace.video {
            self.video.refiner.apply_batch_stats(&t.refiner);
        }
        if let Some(t) = &trace.audio {
            self.audio.refiner.apply_batch_stats(&t.refiner);
        }
    }
}

impl Params for Divine {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Slot<'a>>) {
        self.video.collect(&join(prefix, "video"), out);
        self.audio.collect(&join(prefix, "audio"), out);
        self.shared_enc.collect(&join(prefix, "shared_enc"), out);
        self.to_audio.collect(&join(prefix, "to_audio"), out);
        self.to_video.collect(&join(prefix, "to_video"), out);
        push_matrix(out, prefix, "tokens", &self.tokens, true);
        self.token_dense.collect(&join(prefix, "token_dense"), out);
        self.cls_head.collect(&join(prefix, "cls_head"), out);
        self.sev_head.collect(&join(prefix, "sev_head"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a>>) {
        self.video.collect_mut(&join(prefix, "video"), out);
        self.audio.collect_mut(&join(prefix, "audio"), out);
        self.shared_enc.collect_mut(&join(prefix, "shared_enc"), out);
        self.to_audio.collect_mut(&join(prefix, "to_audio"), out);
        self.to_video.collect_mut(&join(prefix, "to_video"), out);
        push_matrix_mut(out, prefix, "tokens", &mut self.tokens, true);
        self.token_dense.collect_mut(&join(prefix, "token_dense"), out);
        self.cls_head.collect_mut(&join(prefix, "cls_head"), out);
        self.sev_head.collect_mut(&join(prefix, "sev_head"), out);
    }
}

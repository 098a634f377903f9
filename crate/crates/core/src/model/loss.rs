use serde::{Deserialize, Serialize};

use super::config::{Objective, TokenWeightMode};
use crate::error::{Error, Result};

/// Every named loss term of one batch, plus the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub sev: f64,
    pub cycle: f64,
    pub sparse: f64,
    pub token: f64,
    pub window_video: f64,
    pub window_audio: f64,
    pub utter_video: f64,
    pub utter_audio: f64,
    pub total: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 9] {
        [
            ("L_cls", self.cls),
            ("L_sev", self.sev),
            ("L_cycle", self.cycle),
            ("L_sparse", self.sparse),
            ("L_token", self.token),
            ("L_w^v", self.window_video),
            ("L_w^a", self.window_audio),
            ("L_u^v", self.utter_video),
            ("L_u^a", self.utter_audio),
        ]
    }

    /// Recomputes `total` from the component terms.
    pub fn finalize(mut self, objective: &Objective) -> Result<Self> {
        self.alpha = objective.alpha;
        self.epsilon = objective.epsilon;
        self.lambda = objective.lambda;
        self.total = total_loss(&self, objective)?;
        Ok(self)
    }

    /// Sample-weighted accumulation, used to average over mini-batches.
    pub fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.cls += weight * other.cls;
        self.sev += weight * other.sev;
        self.cycle += weight * other.cycle;
        self.sparse += weight * other.sparse;
        self.token += weight * other.token;
        self.window_video += weight * other.window_video;
        self.window_audio += weight * other.window_audio;
        self.utter_video += weight * other.utter_video;
        self.utter_audio += weight * other.utter_audio;
        self.total += weight * other.total;
        self.alpha = other.alpha;
        self.epsilon = other.epsilon;
        self.lambda = other.lambda;
    }
}

/// `L_cls + α L_sev + ε(L_cycle + L_sparse + ελ L_token) + Σ_m (L_w^m + L_u^m)`
///
/// With [`TokenWeightMode::Flat`] the inner token coefficient is `λ` instead
/// of `ελ`. Disabled regularizers contribute nothing.
pub fn total_loss(terms: &LossBreakdown, objective: &Objective) -> Result<f64> {
    for (name, v) in terms.terms() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name}")));
        }
    }
    let o = objective;
    let inner_token = match o.token_mode {
        TokenWeightMode::Literal => o.epsilon * o.lambda,
        TokenWeightMode::Flat => o.lambda,
    };
    let on = |flag: bool| if flag { 1.0 } else { 0.0 };
    let regularizers = on(o.cycle) * terms.cycle + on(o.sparse_gating) * terms.sparse + on(o.token) * inner_token * terms.token;
    let vae = terms.window_video + terms.utter_video + terms.window_audio + terms.utter_audio;
    Ok(on(o.classification) * terms.cls + on(o.severity) * o.alpha * terms.sev + o.epsilon * regularizers + vae)
}

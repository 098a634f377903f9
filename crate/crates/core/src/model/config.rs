use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleMode {
    /// Only `D_a` exists in the loss: `‖D_a(z_s^v) − z_s^a‖²`.
    Asymmetric,
    /// Both directions, which also enables audio-only inference.
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenWeightMode {
    /// Token term weighted by `ε·λ` inside the `ε(...)` group (overall `ε²λ`).
    Literal,
    /// Token term weighted by `λ` inside the group (overall `ελ`).
    Flat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Both,
    VideoOnly,
    AudioOnly,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Both, Modality::VideoOnly, Modality::AudioOnly];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Both => "both",
            Modality::VideoOnly => "video_only",
            Modality::AudioOnly => "audio_only",
        }
    }

    pub fn uses_video(self) -> bool {
        self != Modality::AudioOnly
    }

    pub fn uses_audio(self) -> bool {
        self != Modality::VideoOnly
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Modality::Both),
            "video" | "video_only" => Ok(Modality::VideoOnly),
            "audio" | "audio_only" => Ok(Modality::AudioOnly),
            other => Err(Error::Config(format!("unknown modality `{other}` (both|video|audio)"))),
        }
    }
}

/// Dimensions and structural switches of the DIVINE graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_v: usize,
    pub d_a: usize,
    /// Channels after temporal refinement (d'_m).
    pub d_refined: usize,
    /// Window latent dim (d_w).
    pub d_window: usize,
    /// Shared latent dim (d_s).
    pub d_shared: usize,
    /// Private latent dim (d_p).
    pub d_private: usize,
    /// Number of symptom tokens (K).
    pub n_tokens: usize,
    pub n_classes: usize,
    pub n_severity: usize,
    pub beta_shared: f64,
    pub beta_private: f64,
    pub cycle: CycleMode,
    /// Refuse audio-only inference when no audio→video decoder is trained.
    pub strict: bool,
}

impl ModelConfig {
    pub fn new(d_v: usize, d_a: usize, n_classes: usize, n_severity: usize) -> Self {
        ModelConfig {
            d_v,
            d_a,
            d_refined: 128,
            d_window: 64,
            d_shared: 64,
            d_private: 32,
            n_tokens: 4,
            n_classes,
            n_severity,
            beta_shared: 1.0,
            beta_private: 1.0,
            cycle: CycleMode::Symmetric,
            strict: false,
        }
    }

    /// The small configuration used by the full-graph gradient check.
    pub fn tiny(n_classes: usize, n_severity: usize) -> Self {
        ModelConfig {
            d_refined: 8,
            d_window: 6,
            d_shared: 6,
            d_private: 4,
            n_tokens: 2,
            ..ModelConfig::new(12, 12, n_classes, n_severity)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_v", self.d_v),
            ("d_a", self.d_a),
            ("d_refined", self.d_refined),
            ("d_window", self.d_window),
            ("d_shared", self.d_shared),
            ("d_private", self.d_private),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.n_tokens == 0 {
            return Err(Error::Config("token count K must be >= 1".into()));
        }
        if self.n_classes < 2 || self.n_severity < 2 {
            return Err(Error::Config(format!(
                "need >= 2 diagnosis classes and severity levels, got {} and {}",
                self.n_classes, self.n_severity
            )));
        }
        if !(self.beta_shared >= 0.0 && self.beta_private >= 0.0) {
            return Err(Error::Config("KL weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Loss coefficients and regularizer switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub alpha: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub token_mode: TokenWeightMode,
    pub cycle: bool,
    /// When off, gates are the constant 1 and the sparsity term is dropped.
    pub sparse_gating: bool,
    pub token: bool,
    pub classification: bool,
    pub severity: bool,
}

impl Default for Objective {
    fn default() -> Self {
        Objective {
            alpha: 2.0,
            epsilon: 0.1,
            lambda: 0.4,
            token_mode: TokenWeightMode::Literal,
            cycle: true,
            sparse_gating: true,
            token: true,
            classification: true,
            severity: true,
        }
    }
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.epsilon >= 0.0 && self.lambda >= 0.0) {
            return Err(Error::Config("loss coefficients must be >= 0".into()));
        }
        if !self.classification && !self.severity {
            return Err(Error::Config("at least one task head must be trained".into()));
        }
        Ok(())
    }

    pub fn cls_weight(&self) -> f64 {
        if self.classification {
            1.0
        } else {
            0.0
        }
    }

    pub fn sev_weight(&self) -> f64 {
        if self.severity {
            self.alpha
        } else {
            0.0
        }
    }

    pub fn cycle_weight(&self) -> f64 {
        if self.cycle {
            self.epsilon
        } else {
            0.0
        }
    }

    pub fn sparse_weight(&self) -> f64 {
        if self.sparse_gating {
            self.epsilon
        } else {
            0.0
        }
    }

    /// Overall multiplier of `L_token` in the total.
    pub fn token_weight(&self) -> f64 {
        if !self.token {
            return 0.0;
        }
        match self.token_mode {
            TokenWeightMode::Literal => self.epsilon * self.epsilon * self.lambda,
            TokenWeightMode::Flat => self.epsilon * self.lambda,
        }
    }
}

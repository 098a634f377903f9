use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, Modality, Objective, TokenWeightMode};
use crate::numerics::AdamConfig;

/// Optimization schedule, loss coefficients and ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub alpha: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub token_weight_mode: TokenWeightMode,
    /// Dropout on the fused latent, training only.
    pub dropout: f64,
    pub no_cycle: bool,
    pub no_sparse: bool,
    pub no_token: bool,
    pub flat: bool,
    pub single_level: bool,
    /// Base architecture when neither `flat` nor `single_level` is set.
    pub architecture: Architecture,
    /// Modality used when a single evaluation mode is requested.
    pub modality: Modality,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            alpha: 2.0,
            epsilon: 0.1,
            lambda: 0.4,
            token_weight_mode: TokenWeightMode::Literal,
            dropout: 0.1,
            no_cycle: false,
            no_sparse: false,
            no_token: false,
            flat: false,
            single_level: false,
            architecture: Architecture::Divine,
            modality: Modality::Both,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.flat && self.single_level {
            return Err(Error::Config("`flat` and `single_level` are mutually exclusive".into()));
        }
        self.objective().validate()
    }

    pub fn resolved_architecture(&self) -> Architecture {
        if self.flat {
            Architecture::Flat
        } else if self.single_level {
            Architecture::SingleLevel
        } else {
            self.architecture
        }
    }

    pub fn objective(&self) -> Objective {
        Objective {
            alpha: self.alpha,
            epsilon: self.epsilon,
            lambda: self.lambda,
            token_mode: self.token_weight_mode,
            cycle: !self.no_cycle,
            sparse_gating: !self.no_sparse,
            token: !self.no_token,
            ..Objective::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_flags() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.max_epochs, c.patience), (32, 50, 5));
        assert_eq!(c.resolved_architecture(), Architecture::Divine);
        let o = TrainConfig {
            no_cycle: true,
            no_token: true,
            ..c.clone()
        }
        .objective();
        assert!(!o.cycle && !o.token && o.sparse_gating);
        assert!(TrainConfig { patience: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { flat: true, single_level: true, ..c }.validate().is_err());
    }
}

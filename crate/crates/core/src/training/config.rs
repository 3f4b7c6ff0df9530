use serde::{Deserialize, Serialize};

use super::adam::AdamHyper;
use super::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassWeightMode {
    Uniform,
    InverseFrequency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-loss improvement before stopping.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub class_weights: ClassWeightMode,
    pub bn_momentum: f64,
    /// Chronological tail of each subject's training trials held out.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 20,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            class_weights: ClassWeightMode::InverseFrequency,
            bn_momentum: 0.1,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and nonnegative");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive");
        }
        if self.patience > self.max_epochs {
            return bad("patience must not exceed max_epochs");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay nonnegative");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }
}

/// Inverse-frequency weights `n / (K · n_k)` average to 1 over the samples.
pub fn class_weights(labels: &[usize], n_classes: usize, mode: ClassWeightMode) -> Result<Vec<f64>, TrainError> {
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        if l >= n_classes {
            return Err(TrainError::InvalidConfig(format!("label {l} out of range for {n_classes} classes")));
        }
        counts[l] += 1;
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(TrainError::MissingClass { class });
    }
    Ok(match mode {
        ClassWeightMode::Uniform => vec![1.0; n_classes],
        ClassWeightMode::InverseFrequency => {
            counts.iter().map(|&c| labels.len() as f64 / (n_classes * c) as f64).collect()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_examples() {
        assert_eq!(class_weights(&[0, 1, 1, 0], 2, ClassWeightMode::InverseFrequency).unwrap(), vec![1.0, 1.0]);
        let w = class_weights(&[0, 0, 0, 1, 0, 0, 0, 1], 2, ClassWeightMode::InverseFrequency).unwrap();
        assert!((w[0] - 8.0 / 12.0).abs() < 1e-15 && w[1] == 2.0);
        assert_eq!(class_weights(&[0, 2], 3, ClassWeightMode::Uniform).unwrap_err().to_string(), "class 1 has no training trials");
    }

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        assert!(TrainConfig { patience: 200, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..TrainConfig::default() }.validate().is_err());
    }
}

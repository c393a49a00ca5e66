use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetSpec;
use crate::error::{contract, Result};
use crate::segnet::Architecture;

/// Which unsupervised constraints are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Toggles {
    pub ip_on: bool,
    pub if_on: bool,
    pub fp_on: bool,
}

impl Toggles {
    pub const NONE: Toggles = Toggles {
        ip_on: false,
        if_on: false,
        fp_on: false,
    };
    pub const ALL: Toggles = Toggles {
        ip_on: true,
        if_on: true,
        fp_on: true,
    };
}

impl Default for Toggles {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    /// Scene generation.
    pub data: u64,
    /// Labeled/unlabeled partition.
    pub split: u64,
    /// Initialization, shuffling, augmentation, masks and noise.
    pub run: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 1,
            split: 2,
            run: 3,
        }
    }
}

/// Weights of the objective's terms and the pseudo-label confidence threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub omega: f64,
    pub beta: f64,
    pub ip_weight: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            omega: 0.01,
            beta: 0.01,
            ip_weight: 1.0,
            tau: 0.95,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.omega, self.beta, self.ip_weight];
        if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            contract!("loss weights must be finite and non-negative: {self:?}");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            contract!("tau must lie in [0, 1], got {}", self.tau);
        }
        Ok(())
    }
}

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub lambda: f64,
    pub eta: f64,
    pub n_r: usize,
    pub n_d: usize,
    pub alpha: f64,
    pub omega: f64,
    pub beta: f64,
    pub tau: f64,
    pub ip_weight: f64,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    pub image_size: usize,
    pub feature_channels: usize,
    pub num_classes: usize,
    pub hidden: [usize; 2],
    pub init_scale: f64,
    pub toggles: Toggles,
    /// Checkpoint every this many epochs; 0 disables periodic checkpoints.
    pub ckpt_every: usize,
    pub seeds: Seeds,
    pub n_train: usize,
    pub n_labeled: usize,
    pub n_val: usize,
    /// Scene generator settings; derived from the sizes above when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda: crate::sai::DEFAULT_LAMBDA,
            eta: crate::fka::DEFAULT_ETA,
            n_r: crate::fka::DEFAULT_N_R,
            n_d: crate::fka::DEFAULT_N_D,
            alpha: w.alpha,
            omega: w.omega,
            beta: w.beta,
            tau: w.tau,
            ip_weight: w.ip_weight,
            lr: 0.02,
            momentum: 0.9,
            epochs: 60,
            batch: 4,
            image_size: 64,
            feature_channels: 32,
            num_classes: 4,
            hidden: [16, 32],
            init_scale: 6f64.sqrt(),
            toggles: Toggles::ALL,
            ckpt_every: 0,
            seeds: Seeds::default(),
            n_train: 400,
            n_labeled: 40,
            n_val: 100,
            dataset: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        if !(self.lambda > 0.0) {
            contract!("lambda must be positive, got {}", self.lambda);
        }
        if !(0.0..1.0).contains(&self.eta) {
            contract!("eta must lie in [0, 1), got {}", self.eta);
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            contract!("need lr > 0 and momentum in [0, 1), got {} / {}", self.lr, self.momentum);
        }
        if self.batch == 0 || self.n_r == 0 || self.n_d == 0 {
            contract!("batch, n_r and n_d must be positive");
        }
        if self.image_size == 0 || self.image_size % crate::segnet::UPSAMPLE_FACTOR != 0 {
            contract!("image_size must be a positive multiple of {}", crate::segnet::UPSAMPLE_FACTOR);
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            contract!("num_classes must lie in [2, 255], got {}", self.num_classes);
        }
        if self.n_labeled == 0 || self.n_labeled >= self.n_train || self.n_val == 0 {
            contract!(
                "need 0 < n_labeled < n_train and n_val > 0, got {} / {} / {}",
                self.n_labeled,
                self.n_train,
                self.n_val
            );
        }
        if let Some(spec) = &self.dataset {
            spec.validate()?;
            if spec.height != self.image_size
                || spec.width != self.image_size
                || spec.num_classes != self.num_classes
                || spec.samples != self.n_train + self.n_val
            {
                contract!("dataset settings disagree with image_size/num_classes/n_train+n_val");
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            omega: self.omega,
            beta: self.beta,
            ip_weight: self.ip_weight,
            tau: self.tau,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            hidden: self.hidden,
            feature_channels: self.feature_channels,
            num_classes: self.num_classes,
        }
    }

    /// Training scenes first, validation scenes after them.
    pub fn dataset_spec(&self) -> DatasetSpec {
        self.dataset.clone().unwrap_or_else(|| {
            DatasetSpec::synthetic(
                self.image_size,
                self.num_classes,
                self.n_train + self.n_val,
                self.seeds.data,
            )
        })
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"lambda": 0.2, "toggles": {"ip_on": true, "if_on": false, "fp_on": true}}"#)
            .unwrap();
        assert_eq!(cfg.lambda, 0.2);
        assert!(!cfg.toggles.if_on);
        assert_eq!(cfg.n_r, 16);
        assert_eq!(cfg.n_d, 256);
        assert_eq!(cfg.weights(), LossWeights::default());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_json(r#"{"lamda": 0.2}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"alpha": -1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"image_size": 30}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"momentum": 1.0}"#).is_err());
    }

    #[test]
    fn round_trip_and_hash() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
        let other = ExperimentConfig {
            lr: 0.03,
            ..cfg.clone()
        };
        assert_ne!(other.hash(), cfg.hash());
    }
}

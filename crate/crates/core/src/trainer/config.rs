use crate::config::{fmt_f64, ConfigError, KeyValues};

/// Keys understood by [`TrainConfig::apply_kv`].
pub const TRAIN_KEYS: [&str; 13] = [
    "train.max_epochs",
    "train.batch_size",
    "train.lr",
    "train.decay_step",
    "train.decay_factor",
    "train.alpha",
    "train.beta",
    "train.patience",
    "train.min_delta",
    "train.split_train",
    "train.split_val",
    "train.split_test",
    "train.seed",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Epochs between learning-rate decays.
    pub decay_step: usize,
    pub decay_factor: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Epochs without a `min_delta` improvement before stopping.
    pub patience: usize,
    pub min_delta: f64,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            batch_size: 1024,
            initial_lr: 5e-4,
            decay_step: 50,
            decay_factor: 0.1,
            alpha: 1.0,
            beta: 0.01,
            patience: 10,
            min_delta: 1e-5,
            split: [0.70, 0.15, 0.15],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.max_epochs == 0 || self.batch_size == 0 || self.decay_step == 0 {
            return bad("max_epochs, batch_size and decay_step must be positive".into());
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.initial_lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return bad(format!("decay factor {} must be positive", self.decay_factor));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return bad("alpha and beta must be non-negative".into());
        }
        if !(self.min_delta >= 0.0) {
            return bad("min_delta must be non-negative".into());
        }
        let [tr, va, te] = self.split;
        if !(tr > 0.0 && va > 0.0 && te >= 0.0) || (tr + va + te - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {:?} must be positive and sum to 1", self.split));
        }
        Ok(())
    }

    /// Learning rate of 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = epoch.saturating_sub(1) / self.decay_step;
        self.initial_lr * self.decay_factor.powi(decays as i32)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("train.max_epochs", self.max_epochs);
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.lr", fmt_f64(self.initial_lr));
        kv.set("train.decay_step", self.decay_step);
        kv.set("train.decay_factor", fmt_f64(self.decay_factor));
        kv.set("train.alpha", fmt_f64(self.alpha));
        kv.set("train.beta", fmt_f64(self.beta));
        kv.set("train.patience", self.patience);
        kv.set("train.min_delta", fmt_f64(self.min_delta));
        kv.set("train.split_train", fmt_f64(self.split[0]));
        kv.set("train.split_val", fmt_f64(self.split[1]));
        kv.set("train.split_test", fmt_f64(self.split[2]));
        kv.set("train.seed", self.seed);
        kv
    }

    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<(), ConfigError> {
        kv.read_into("train.max_epochs", &mut self.max_epochs)?;
        kv.read_into("train.batch_size", &mut self.batch_size)?;
        kv.read_into("train.lr", &mut self.initial_lr)?;
        kv.read_into("train.decay_step", &mut self.decay_step)?;
        kv.read_into("train.decay_factor", &mut self.decay_factor)?;
        kv.read_into("train.alpha", &mut self.alpha)?;
        kv.read_into("train.beta", &mut self.beta)?;
        kv.read_into("train.patience", &mut self.patience)?;
        kv.read_into("train.min_delta", &mut self.min_delta)?;
        kv.read_into("train.split_train", &mut self.split[0])?;
        kv.read_into("train.split_val", &mut self.split[1])?;
        kv.read_into("train.split_test", &mut self.split[2])?;
        kv.read_into("train.seed", &mut self.seed)?;
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_kv(kv)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_schedule() {
        let cfg = TrainConfig::default();
        for e in 1..=50 {
            assert_eq!(cfg.lr_at(e), 5e-4);
        }
        for e in 51..=100 {
            assert!((cfg.lr_at(e) - 5e-5).abs() < 1e-20);
        }
        assert!((cfg.lr_at(101) - 5e-6).abs() < 1e-20);
    }

    #[test]
    fn kv_roundtrip_and_validation() {
        let mut cfg = TrainConfig::default();
        cfg.seed = 17;
        cfg.alpha = 0.0;
        assert_eq!(TrainConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        cfg.split = [0.7, 0.2, 0.2];
        assert!(cfg.validate().is_err());
        cfg.split = [0.7, 0.15, 0.15];
        cfg.initial_lr = 0.0;
        assert!(cfg.validate().is_err());
    }
}

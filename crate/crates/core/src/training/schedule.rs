use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Constant learning rate from `from_epoch` (zero-based) until the next stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrStage {
    pub from_epoch: usize,
    pub rate: f64,
}

/// Optimization hyperparameters for both training phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub warmup_epochs: usize,
    /// Rate reached at the end of warmup.
    pub peak_lr: f64,
    /// Stages after warmup, sorted by `from_epoch`.
    pub lr_stages: Vec<LrStage>,
    pub xe_epochs: usize,
    pub scst_epochs: usize,
    pub scst_lr: f64,
    pub beam_size: usize,
    pub xe_batch: usize,
    pub scst_batch: usize,
    /// Reference captions used per example in one XE epoch, rotating across epochs.
    pub xe_refs_per_example: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient norm bound during SCST; zero disables clipping.
    pub scst_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl TrainConfig {
    /// Full-scale schedule.
    pub fn reference() -> Self {
        Self {
            warmup_epochs: 4,
            peak_lr: 1e-4,
            lr_stages: vec![
                LrStage { from_epoch: 4, rate: 1e-4 },
                LrStage { from_epoch: 10, rate: 2e-6 },
                LrStage { from_epoch: 12, rate: 4e-7 },
            ],
            xe_epochs: 18,
            scst_epochs: 20,
            scst_lr: 5e-6,
            beam_size: 5,
            xe_batch: 50,
            scst_batch: 100,
            xe_refs_per_example: 1,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            scst_clip: 1.0,
        }
    }

    /// Compressed schedule for the synthetic corpus: the reference rates with
    /// stage boundaries scaled from 18 XE epochs to 10, and smaller batches.
    pub fn desk() -> Self {
        Self {
            warmup_epochs: 2,
            lr_stages: vec![
                LrStage { from_epoch: 2, rate: 1e-4 },
                LrStage { from_epoch: 6, rate: 2e-6 },
                LrStage { from_epoch: 7, rate: 4e-7 },
            ],
            xe_epochs: 10,
            scst_epochs: 5,
            xe_batch: 10,
            scst_batch: 10,
            ..Self::reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.xe_batch == 0 || self.scst_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if self.beam_size == 0 {
            return bad("beam size must be at least 1");
        }
        if self.scst_epochs > 0 && self.beam_size < 2 {
            return bad("SCST needs a beam of at least 2 for its mean baseline");
        }
        if self.xe_refs_per_example == 0 {
            return bad("xe_refs_per_example must be positive");
        }
        let rates = [self.peak_lr, self.scst_lr, self.eps, self.scst_clip].into_iter().chain(self.lr_stages.iter().map(|s| s.rate));
        if rates.into_iter().any(|r| !r.is_finite() || r < 0.0) {
            return bad("rates must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam moment decays must lie in [0, 1)");
        }
        if self.lr_stages.windows(2).any(|w| w[0].from_epoch >= w[1].from_epoch) {
            return bad("lr_stages must be strictly increasing in from_epoch");
        }
        Ok(())
    }
}

/// XE learning rate at `step` of zero-based `epoch`, where an epoch has
/// `steps_per_epoch` steps. Rises linearly from zero over the warmup epochs,
/// then follows the stage table.
pub fn lr_schedule(epoch: usize, step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        let spe = steps_per_epoch.max(1) as f64;
        let progress = epoch as f64 + (step as f64).min(spe) / spe;
        return cfg.peak_lr * progress / cfg.warmup_epochs as f64;
    }
    cfg.lr_stages.iter().rev().find(|s| s.from_epoch <= epoch).map_or(cfg.peak_lr, |s| s.rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_schedule_values() {
        let c = TrainConfig::reference();
        assert_eq!(lr_schedule(0, 0, 100, &c), 0.0);
        assert!((lr_schedule(2, 0, 100, &c) - 5e-5).abs() < 1e-18);
        assert!((lr_schedule(1, 100, 100, &c) - 5e-5).abs() < 1e-18);
        assert_eq!(lr_schedule(4, 0, 100, &c), 1e-4);
        assert_eq!(lr_schedule(9, 99, 100, &c), 1e-4);
        assert_eq!(lr_schedule(10, 0, 100, &c), 2e-6);
        assert_eq!(lr_schedule(11, 0, 100, &c), 2e-6);
        assert_eq!(lr_schedule(12, 0, 100, &c), 4e-7);
        assert_eq!(lr_schedule(17, 0, 100, &c), 4e-7);
    }

    #[test]
    fn desk_schedule_passes_through_every_reference_rate() {
        let d = TrainConfig::desk();
        let rates: Vec<f64> = (0..d.xe_epochs).map(|e| lr_schedule(e, 0, 10, &d)).collect();
        assert_eq!(rates[1], 5e-5);
        assert_eq!(&rates[2..], &[1e-4, 1e-4, 1e-4, 1e-4, 2e-6, 4e-7, 4e-7, 4e-7]);
    }

    #[test]
    fn warmup_is_linear_within_an_epoch() {
        let c = TrainConfig::reference();
        let a = lr_schedule(0, 25, 100, &c);
        let b = lr_schedule(0, 50, 100, &c);
        assert!((2.0 * a - b).abs() < 1e-18);
    }

    #[test]
    fn presets_validate_and_bad_values_do_not() {
        TrainConfig::reference().validate().unwrap();
        TrainConfig::desk().validate().unwrap();
        let c = TrainConfig { beam_size: 1, ..TrainConfig::desk() };
        assert!(c.validate().is_err());
        let c = TrainConfig { beam_size: 1, scst_epochs: 0, ..TrainConfig::desk() };
        c.validate().unwrap();
        assert!(TrainConfig { xe_batch: 0, ..TrainConfig::desk() }.validate().is_err());
        assert!(TrainConfig { beta2: 1.0, ..TrainConfig::desk() }.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = TrainConfig::desk();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<TrainConfig>(&text).unwrap(), c);
        let partial: TrainConfig = toml::from_str("xe_epochs = 3").unwrap();
        assert_eq!(partial.xe_epochs, 3);
        assert!(toml::from_str::<TrainConfig>("nonsense = 1").is_err());
    }

    proptest! {
        #[test]
        fn schedule_is_total_and_bounded(epoch in 0usize..10_000, step in 0usize..100_000, spe in 0usize..5_000) {
            let c = TrainConfig::reference();
            let lr = lr_schedule(epoch, step, spe, &c);
            prop_assert!(lr.is_finite() && (0.0..=c.peak_lr).contains(&lr));
            prop_assert_eq!(lr.to_bits(), lr_schedule(epoch, step, spe, &c).to_bits());
        }
    }
}

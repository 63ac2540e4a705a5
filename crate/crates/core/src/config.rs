//! Hyperparameter and attack settings shared by training and evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regularizer applied to queried unlabeled data in standard training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LwfKind {
    /// Temperature-scaled soft cross-entropy against the snapshot.
    Kd,
    /// l1 distance between live and snapshot features.
    Ft,
}

/// Regularizer applied to queried unlabeled data under adversarial training.
///
/// `Kd` and `Ft` keep the clean regularizer while the labeled terms are
/// trained adversarially.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustLwfKind {
    Rkd,
    Rft,
    Kd,
    Ft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparameters {
    /// Weight of the LwF terms in standard training.
    pub lambda_lwf: f64,
    /// Weight of the robust LwF terms.
    pub gamma1: f64,
    /// Weight of the TRADES-style consistency term.
    pub gamma2: f64,
    pub kd_temperature: f64,
    pub lwf_kind: LwfKind,
    pub robust_lwf_kind: RobustLwfKind,
    pub use_rtc: bool,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            lambda_lwf: 0.5,
            gamma1: 0.05,
            gamma2: 0.2,
            kd_temperature: 2.0,
            lwf_kind: LwfKind::Kd,
            robust_lwf_kind: RobustLwfKind::Rkd,
            use_rtc: false,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_lwf", self.lambda_lwf), ("gamma1", self.gamma1), ("gamma2", self.gamma2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.kd_temperature > 0.0 && self.kd_temperature.is_finite()) {
            return Err(Error::config(format!("kd_temperature must be > 0, got {}", self.kd_temperature)));
        }
        Ok(())
    }
}

/// l-infinity PGD settings, in pixel units of `[0, 1]` images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub random_start: bool,
}

impl AttackConfig {
    /// Attack used inside adversarial training: 10 steps with random start.
    pub const fn training() -> Self {
        Self { epsilon: 8.0 / 255.0, alpha: 2.0 / 255.0, steps: 10, random_start: true }
    }

    /// Attack used to measure robust accuracy: 20 steps from the clean point.
    pub const fn evaluation() -> Self {
        Self { epsilon: 8.0 / 255.0, alpha: 2.0 / 255.0, steps: 20, random_start: false }
    }

    /// No perturbation at all.
    pub const fn identity() -> Self {
        Self { epsilon: 0.0, alpha: 0.0, steps: 0, random_start: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::config(format!("epsilon must lie in [0, 1], got {}", self.epsilon)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Which perturbation the ensemble is scored against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CemAttack {
    /// Perturb against the primary head's full logits, then route.
    Transfer,
    /// Perturb against the head and class block the clean input is routed to.
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CemConfig {
    pub k_neighbors: usize,
    pub attack: CemAttack,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self { k_neighbors: 50, attack: CemAttack::Transfer }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors == 0 {
            return Err(Error::config("cem.k_neighbors must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    Standard,
    Robust,
}

/// Sizes of the class-balanced, random-sample and unlabeled batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSizes {
    pub class_balanced: usize,
    pub random: usize,
    pub unlabeled: usize,
}

impl Default for BatchSizes {
    fn default() -> Self {
        Self { class_balanced: 64, random: 64, unlabeled: 128 }
    }
}

impl BatchSizes {
    pub fn total(&self) -> usize {
        self.class_balanced + self.random + self.unlabeled
    }
}

/// Where the LwF terms are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LwfData {
    /// Queried unlabeled pool.
    Queried,
    /// Memory-bank exemplars only (the vanilla baseline).
    Stored,
}

/// Switches that turn the full method into its ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodConfig {
    pub auxiliary_head: bool,
    pub lwf_data: LwfData,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self { auxiliary_head: true, lwf_data: LwfData::Queried }
    }
}

impl MethodConfig {
    /// Primary head only, LwF on stored exemplars, no query.
    pub fn vanilla() -> Self {
        Self { auxiliary_head: false, lwf_data: LwfData::Stored }
    }
}

/// Optimisation settings for one incremental session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionConfig {
    pub epochs: usize,
    /// `(first epoch, learning rate)` pairs in ascending epoch order.
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub batch: BatchSizes,
    /// Defaults to one pass of the random-sample batch over the task data.
    pub steps_per_epoch: Option<usize>,
    pub augment: bool,
    pub hyperparameters: Hyperparameters,
    pub attack: AttackConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self::with_epochs(20, 0.01)
    }
}

impl SessionConfig {
    /// `base_lr` decayed by 10x at 60% and again at 80% of the epochs.
    pub fn with_epochs(epochs: usize, base_lr: f64) -> Self {
        Self {
            epochs,
            lr_schedule: step_schedule(epochs, base_lr),
            momentum: 0.9,
            batch: BatchSizes::default(),
            steps_per_epoch: None,
            augment: false,
            hyperparameters: Hyperparameters::default(),
            attack: AttackConfig::training(),
        }
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr_schedule.iter().take_while(|(start, _)| *start <= epoch).last().map(|(_, lr)| *lr).unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.lr_schedule.first().map(|(e, _)| *e) != Some(0) {
            return Err(Error::config("lr_schedule must start at epoch 0"));
        }
        if self.lr_schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::config("lr_schedule epochs must be strictly increasing"));
        }
        if self.lr_schedule.iter().any(|(_, lr)| !(*lr > 0.0 && lr.is_finite())) {
            return Err(Error::config("learning rates must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::config("steps_per_epoch must be >= 1"));
        }
        self.hyperparameters.validate()?;
        self.attack.validate()
    }
}

pub fn step_schedule(epochs: usize, base_lr: f64) -> Vec<(usize, f64)> {
    let mut schedule = vec![(0, base_lr)];
    let first = (epochs * 3).div_ceil(5);
    let second = (epochs * 4).div_ceil(5);
    if first > 0 && first < epochs {
        schedule.push((first, base_lr * 0.1));
    }
    if second > first && second < epochs {
        schedule.push((second, base_lr * 0.01));
    }
    schedule
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let h = Hyperparameters::default();
        assert_eq!((h.lambda_lwf, h.gamma1, h.gamma2), (0.5, 0.05, 0.2));
        let t = AttackConfig::training();
        assert_eq!((t.epsilon, t.alpha, t.steps), (8.0 / 255.0, 2.0 / 255.0, 10));
        assert_eq!(AttackConfig::evaluation().steps, 20);
        assert_eq!(BatchSizes::default().total(), 256);
        assert_eq!(CemConfig::default().k_neighbors, 50);
    }

    #[test]
    fn schedule_decays_at_sixty_and_eighty_percent() {
        let cfg = SessionConfig::with_epochs(100, 0.01);
        assert_eq!(cfg.learning_rate(0), 0.01);
        assert_eq!(cfg.learning_rate(59), 0.01);
        assert!((cfg.learning_rate(60) - 0.001).abs() < 1e-15);
        assert!((cfg.learning_rate(80) - 0.0001).abs() < 1e-15);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let mut a = AttackConfig::training();
        a.epsilon = 1.5;
        assert!(a.validate().is_err());
        let h = Hyperparameters { kd_temperature: 0.0, ..Hyperparameters::default() };
        assert!(h.validate().is_err());
        let s = SessionConfig { epochs: 0, ..SessionConfig::default() };
        assert!(s.validate().is_err());
    }
}

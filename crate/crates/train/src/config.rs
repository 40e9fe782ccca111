//! Training configuration and the ablation presets.

use derprop_core::losses::Reduction;
use derprop_core::similarity::{KernelScale, DEFAULT_TAU};
use derprop_core::{DerLossSpec, HighOrderTarget, LossWeights};
use serde::{Deserialize, Serialize};

use crate::augment::AugmentParams;
use crate::error::{TrainError, TrainResult};
use crate::scene::SceneParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    /// Rectify pseudo-labels with derivative label propagation and add the
    /// CE terms on rectified predictions.
    pub dlp_enabled: bool,
    pub der_loss_enabled: bool,
    /// Evaluate with the epoch-averaged momentum network instead of the live one.
    pub momentum_enabled: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            dlp_enabled: true,
            der_loss_enabled: true,
            momentum_enabled: true,
        }
    }
}

/// How labeled and unlabeled samples share an optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSchedule {
    /// Every step takes `batch_size` labeled scenes (cycling through the
    /// labeled set) and the next `batch_size` unlabeled scenes of the epoch's
    /// shuffled order. The step gradient is the labeled batch mean plus the
    /// unlabeled batch mean. An epoch is one pass over the unlabeled set, or
    /// over the labeled set when nothing is unlabeled.
    Paired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub scene: SceneParams,
    pub labeled_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Heavy-ball coefficient of SGD; 0 is plain SGD.
    pub optimizer_momentum: f64,
    /// Global gradient-norm cap per step; 0 disables clipping.
    pub grad_clip: f64,
    pub hidden: usize,
    pub feature_dim: usize,
    pub weights: LossWeights,
    pub der_loss: DerLossSpec,
    /// Factor on `S + Δ¹S` when rectifying, for both the teacher and the
    /// rectified CE term.
    pub kernel_scale: KernelScale,
    pub tau: f64,
    pub toggles: Toggles,
    pub augment: AugmentParams,
    /// Validation scenes whose predicted maps are written each epoch.
    pub saved_maps: usize,
    pub batch_schedule: BatchSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 32,
            width: 32,
            classes: 4,
            train_scenes: 16,
            val_scenes: 8,
            scene: SceneParams::default(),
            labeled_fraction: 0.125,
            epochs: 30,
            batch_size: 2,
            learning_rate: 0.5,
            optimizer_momentum: 0.9,
            grad_clip: 1.0,
            hidden: 16,
            feature_dim: 8,
            weights: LossWeights::default(),
            der_loss: DerLossSpec {
                reduction: Reduction::Mean,
                ..DerLossSpec::default()
            },
            kernel_scale: KernelScale::DimOverPixels,
            tau: DEFAULT_TAU,
            toggles: Toggles::default(),
            augment: AugmentParams::default(),
            saved_maps: 2,
            batch_schedule: BatchSchedule::Paired,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// No rectification, no rectified CE, no derivative loss, no momentum network.
    WithoutDlp,
    /// Rectified pseudo-labels but no derivative loss and no momentum network.
    WithoutDer,
    WithoutMomentum,
    /// Full method with the `η‖Δ^{Q+1}V‖₁` term dropped.
    SparsityOff,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::WithoutDlp,
        Ablation::WithoutDer,
        Ablation::WithoutMomentum,
        Ablation::SparsityOff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::WithoutDlp => "w/o DLP",
            Ablation::WithoutDer => "w/o Der",
            Ablation::WithoutMomentum => "w/o momentum",
            Ablation::SparsityOff => "sparsity off",
        }
    }

    pub fn apply(self, mut cfg: TrainConfig) -> TrainConfig {
        let t = &mut cfg.toggles;
        match self {
            Ablation::Full => {}
            Ablation::WithoutDlp => {
                t.dlp_enabled = false;
                t.der_loss_enabled = false;
                t.momentum_enabled = false;
            }
            Ablation::WithoutDer => {
                t.der_loss_enabled = false;
                t.momentum_enabled = false;
            }
            Ablation::WithoutMomentum => t.momentum_enabled = false,
            Ablation::SparsityOff => cfg.der_loss.sparsity_enabled = false,
        }
        cfg
    }
}

impl TrainConfig {
    pub fn validate(&self) -> TrainResult<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return bad(format!("labeled_fraction must be in (0, 1], got {}", self.labeled_fraction));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.train_scenes == 0 {
            return bad("batch_size and train_scenes must be positive".into());
        }
        if self.height < 4 || self.width < 4 || self.classes < 2 {
            return bad("scenes need H, W >= 4 and at least 2 classes".into());
        }
        if self.hidden == 0 || self.feature_dim < 2 {
            return bad("need hidden >= 1 and feature_dim >= 2".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.optimizer_momentum) {
            return bad(format!("optimizer_momentum must be in [0, 1), got {}", self.optimizer_momentum));
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must be in [0, 1], got {}", self.tau));
        }
        if self.weights.eta != self.der_loss.eta {
            return bad(format!(
                "weights.eta ({}) and der_loss.eta ({}) must agree",
                self.weights.eta, self.der_loss.eta
            ));
        }
        let probs = [
            self.augment.flip_prob,
            self.augment.crop_prob,
            self.augment.color_prob,
            self.augment.gray_prob,
            self.augment.blur_prob,
            self.augment.mix_prob,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("augmentation probabilities must be in [0, 1]".into());
        }
        self.weights.validate()?;
        if self.toggles.der_loss_enabled {
            self.der_loss.validate(self.feature_dim)?;
            if self.der_loss.labeled_high_order_target == HighOrderTarget::LabelDerivative
                && self.classes <= self.der_loss.order_budget
            {
                return bad(format!(
                    "label_derivative targets need more classes than the order budget {}",
                    self.der_loss.order_budget
                ));
            }
        }
        Ok(())
    }

    /// Number of labeled training scenes: `round(fraction · N)`, at least 1.
    pub fn labeled_count(&self) -> usize {
        ((self.labeled_fraction * self.train_scenes as f64).round() as usize).clamp(1, self.train_scenes)
    }
}

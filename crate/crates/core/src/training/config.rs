use serde::{Deserialize, Serialize};

use super::losses::{RegKind, BIAS_CLAMP};
use super::optim::OptimizerKind;
use crate::error::{ensure, Error, Result};
use crate::scoring::{check_ratio, LabelMode};

/// Plain gradient-descent step sizes used when `lr` is unset. The stage-2
/// gradient reaching the scores is scaled by `k / (r * n_v)` through the
/// regularizer and by the frozen model through the mask, so it needs a much
/// larger step than the stage-1 regression.
pub const STAGE1_LR: f64 = 0.02;
pub const STAGE2_LR: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierInit {
    /// Start from a stage-1 checkpoint; an untrained classifier is an error.
    #[default]
    Stage1,
    /// Start from fresh random weights.
    Random,
}

/// Settings for one classifier training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: u8,
    pub lr: Option<f64>,
    pub lr_floor: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Cap on optimizer steps; unset means full epochs.
    pub max_steps: Option<usize>,
    pub k: f64,
    pub r: f64,
    pub guidance_layer: usize,
    pub label_mode: LabelMode,
    pub normalize: bool,
    pub regularizer: RegKind,
    pub bias_clamp: f64,
    pub init: ClassifierInit,
    /// Regularizer weight used for the first `warmup_steps` steps.
    pub warmup_k: Option<f64>,
    pub warmup_steps: usize,
    pub freeze_lvlm: bool,
    pub optimizer: OptimizerKind,
    /// Record a P histogram every this many steps (stage 2).
    pub hist_every: usize,
    pub hist_bins: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: 1,
            lr: None,
            lr_floor: 0.0,
            epochs: 1,
            batch: 8,
            max_steps: None,
            k: 0.01,
            r: 0.25,
            guidance_layer: 2,
            label_mode: LabelMode::TextQueries,
            normalize: true,
            regularizer: RegKind::Contrastive,
            bias_clamp: BIAS_CLAMP,
            init: ClassifierInit::Stage1,
            warmup_k: None,
            warmup_steps: 0,
            freeze_lvlm: true,
            optimizer: OptimizerKind::Sgd,
            hist_every: 64,
            hist_bins: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn stage1() -> Self {
        TrainConfig::default()
    }

    pub fn stage2() -> Self {
        TrainConfig {
            stage: 2,
            ..TrainConfig::default()
        }
    }

    pub fn effective_lr(&self) -> f64 {
        self.lr.unwrap_or(if self.stage == 1 {
            STAGE1_LR
        } else {
            STAGE2_LR
        })
    }

    pub fn validate(&self, decoder_layers: usize) -> Result<()> {
        ensure!(
            self.stage == 1 || self.stage == 2,
            Error::InvalidArgument(format!("stage must be 1 or 2, got {}", self.stage))
        );
        ensure!(
            self.k >= 0.0,
            Error::InvalidArgument(format!("k = {} < 0", self.k))
        );
        if let Some(w) = self.warmup_k {
            ensure!(
                w >= 0.0,
                Error::InvalidArgument(format!("warmup_k = {w} < 0"))
            );
        }
        check_ratio(self.r)?;
        ensure!(
            self.guidance_layer < decoder_layers,
            Error::LayerOutOfRange {
                index: self.guidance_layer,
                layers: decoder_layers
            }
        );
        ensure!(
            self.batch >= 1,
            Error::InvalidArgument("batch must be >= 1".into())
        );
        ensure!(
            self.epochs >= 1,
            Error::InvalidArgument("epochs must be >= 1".into())
        );
        ensure!(
            self.effective_lr() > 0.0 && self.effective_lr().is_finite(),
            Error::InvalidArgument("lr must be positive".into())
        );
        ensure!(
            self.bias_clamp < 0.0,
            Error::InvalidArgument("bias_clamp must be negative".into())
        );
        ensure!(
            self.hist_bins >= 1,
            Error::InvalidArgument("hist_bins must be >= 1".into())
        );
        Ok(())
    }
}

/// Settings for fine-tuning the stand-in language model on the task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseTrainConfig {
    pub lr: f64,
    pub lr_floor: f64,
    pub epochs: usize,
    pub batch: usize,
    pub max_steps: Option<usize>,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        BaseTrainConfig {
            lr: 2e-3,
            lr_floor: 1e-4,
            epochs: 2,
            batch: 8,
            max_steps: None,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl BaseTrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.batch >= 1 && self.epochs >= 1,
            Error::InvalidArgument("batch and epochs must be >= 1".into())
        );
        ensure!(
            self.lr > 0.0 && self.lr.is_finite(),
            Error::InvalidArgument("lr must be positive".into())
        );
        Ok(())
    }
}

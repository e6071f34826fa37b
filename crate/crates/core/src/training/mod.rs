//! Classifier training: attention-label regression (stage 1) and
//! soft-mask training with a retention regularizer (stage 2).

mod config;
mod gradcheck;
mod loops;
mod losses;
mod optim;

pub use config::{BaseTrainConfig, ClassifierInit, TrainConfig, STAGE1_LR, STAGE2_LR};
pub use gradcheck::{loss_grad_checks, LossCheck, CHECK_K};
pub use loops::{
    classifier_input, stage1_labels, supervised_targets, train_base, train_stage1, train_stage2,
    PHistogram, StepLog, TrainReport,
};
pub use losses::{
    build_soft_mask, contrastive_split, log_bias, reg_contrastive_value, reg_naive_value,
    regularizer, sigmoid_probs, stage1_loss, stage1_loss_value, stage2_loss, RegKind, SoftMask,
    BIAS_CLAMP,
};
pub use optim::{CosineSchedule, Optimizer, OptimizerKind};

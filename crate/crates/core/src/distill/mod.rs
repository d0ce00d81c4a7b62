//! Contrastive training and teacher→student distillation for pruned models.

mod losses;
mod optim;
mod train;

pub use losses::{
    feat_loss, feat_loss_value, hidden_loss, hidden_loss_value, itc_loss, itc_loss_value, sim_loss, sim_loss_value,
    total_loss, weighted_total, LayerMap, LossComponents, LossWeights,
};
pub use optim::{AdamW, CosineSchedule};
pub use train::{train_distill, DistillConfig, EpochLog, StepLog, TrainReport, MAX_LOGIT_SCALE};

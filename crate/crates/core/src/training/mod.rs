//! Mean-teacher semi-supervised fine-tuning and clip-tagging pretraining.

mod augment;
mod loss;
mod optim;
mod pretrain;
mod schedule;
mod trainer;

pub use augment::{augment_group, filter_augment, mixup, random_filter, time_mask, time_shift, AugmentConfig, Sample};
pub use loss::{clip_objective, total_loss, LossBreakdown, LossScale, Targets};
pub use optim::{ema_beta_at, ema_update, AdamW};
pub use pretrain::{pretrain_at, tagging_macro_f1, PretrainConfig, PretrainOutcome};
pub use schedule::{alpha_ramp, BatchSpec, TrainSchedule};
pub use trainer::{iterations_per_epoch, train, EpochRow, IterationRow, TrainOptions, TrainOutcome, SOURCES};

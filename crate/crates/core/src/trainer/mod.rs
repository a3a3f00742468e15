//! Training: augmentation, losses, optimizer, checkpoints, and evaluation.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod optim;
pub mod targets;
pub mod train;

pub use augment::{augment, AugmentConfig, AugmentMode};
pub use config::{Config, TrainConfig};
pub use metrics::{argmax_classes, Confusion, MiouReport};
pub use optim::{cosine_lr, AmsGrad};
pub use targets::{composite_loss, soft_targets, CompositeLoss};
pub use train::{
    evaluate, log_csv, multi_scale_probs, predict_labels, predict_logits, recompute_bn_stats,
    to_input, train, EpochLog, MultiScale, TrainOutcome, MS_SCALES,
};

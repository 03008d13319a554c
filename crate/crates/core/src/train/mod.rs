//! Black-box training, test-statistic distillation, direct training and the
//! zero-padding control experiment.

mod config;
mod fit;
mod zeropad;

pub use config::{EpochRecord, LossKind, TrainConfig, TrainReport};
pub use fit::{direct_train_interpretable, distill_interpretable, teacher_targets, train_blackbox, FeatureCache};
pub use zeropad::{
    zero_pad_experiment, zero_pad_target, zero_pad_targets, ZeroPadConfig, ZeroPadLayout, ZeroPadReport, ZeroPadRow,
};

pub(crate) use fit::all_images;
pub(crate) use zeropad::{mean_baseline, spread_indices};

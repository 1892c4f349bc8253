//! Cross-validated training with Dice loss and AdamW.

mod augment;
mod config;
mod folds;
mod log;
mod runner;

pub use augment::{augment_pair, AugmentDraw, Normalization};
pub use config::{
    apply_override, data_layout, Averaging, DataSource, DatasetPreset, ExperimentConfig, ModelSection, Precision,
    TrainConfig,
};
pub use folds::{make_folds, DataSetting, FoldPlan, N_FOLDS};
pub use log::{EpochRecord, RunLog};
pub use runner::{dice_target, evaluate, predict, train_run, Evaluation, RunOutcome};

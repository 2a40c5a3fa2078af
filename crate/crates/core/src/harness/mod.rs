//! Training, evaluation, cross-validation and ablation runs.

pub mod ablate;
pub mod config;
pub mod data;
pub mod explain;
pub mod kfold;
pub mod metrics;
pub mod run;
pub mod train;

pub use ablate::{AblationAxis, AblationTable, Variant, VariantData};
pub use config::RunConfig;
pub use data::{Dataset, Example};
pub use kfold::{constant_classifier_accuracy, kfold, kfold_with, stratified_folds, FoldResult, KFoldReport};
pub use metrics::{ClassMetrics, ConfusionMatrix, MetricsReport};
pub use run::{load_checkpoint, save_run, Checkpoint, ModelInfo};
pub use train::{evaluate, train, EpochRecord, LogRecord, StepRecord, TrainOutcome};

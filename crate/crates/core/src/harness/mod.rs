//! Training, evaluation, attention export and experiment grids.

mod adam;
mod attention;
mod config;
mod ladder;
mod metrics;
mod train;

pub use adam::{adam_step, AdamState};
pub use attention::{attention_rows, export_attention, AttentionRow};
pub use config::{lr_schedule, DataConfig, TrainConfig};
pub use ladder::{
    reference_accuracy, run_experiment_ladder, LadderCell, LadderConfig, LadderResults, RunResult,
    REFERENCE_ACCURACY, REFERENCE_TRAIN_SIZES,
};
pub use metrics::{
    evaluate, mean_sem, BagPrediction, ClassMetrics, ConfusionMatrix, Evaluation, Metrics,
};
pub use train::{
    load_data, train, train_step, write_evaluation, EpochRecord, StepReport, TrainOptions,
    TrainOutcome,
};

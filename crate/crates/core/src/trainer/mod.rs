//! Optimization loop, losses and synthetic teacher tasks.

mod metrics;
mod optim;
mod task;
mod train;

pub use metrics::{
    metrics_csv, read_metrics_csv, without_timing_columns, write_metrics_csv, TrainSummary,
    METRICS_COLUMNS, TIMING_COLUMNS,
};
pub use optim::{adamw_step, AdamW, LrSchedule, OptimizerState, ScheduleKind};
pub use task::{make_task, SyntheticTask, TaskKind, TaskSpec};
pub use train::{
    build_student, cross_entropy_loss, evaluate, mse_loss, train, QuantSpec, StepRecord,
    TrainConfig, TrainOutcome,
};

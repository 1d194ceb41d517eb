//! Two-stage training: configuration, optimizers, checkpoints, metrics,
//! the teacher and student loops, evaluation and the ablation harness.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod optim;
pub mod train;

pub use ablation::{ablation_csv, run_ablation, train_one_stage, AblationRow, AblationSetting, ABLATION_ROWS};
pub use checkpoint::Checkpoint;
pub use config::{apply_override, resolve_config, resolve_layered, OptimizerConfig, ScheduleConfig, Stage, TrainConfig};
pub use metrics::{metrics_csv, top1, write_metrics_csv, MetricsRecord, CSV_HEADER};
pub use optim::{lr_factor, Optimizer};
pub use train::{
    evaluate, evaluate_model, load_teacher, train_student, train_student_with, train_teacher, verify_frozen, EvalSet,
    RunDir, RunOutput,
};

//! End-to-end training runs: configuration, the training loop, metrics
//! and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod report;
pub mod train;

pub use checkpoint::{init_from_pretrained, Checkpoint};
pub use config::{DataKind, TrainConfig, WeightScaleMode, CONFIG_KEYS};
pub use report::{read_steps_csv, write_steps_csv, EpochRow, RunMetrics, RunStatus, StepRow, STEP_HEADER};
pub use train::{
    audit_groups, build_param_groups, compare_wall_clock, load_datasets, LoadedData, measure_overhead, run_training, run_training_on, total_steps,
    Overhead, StepOutcome, TrainOutput, Trainer,
};

//! Objective assembly, optimization and the training loop.

mod checkpoint;
mod config;
pub mod losses;
mod run;
mod step;

pub use checkpoint::{decode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use config::{ExperimentConfig, LossWeights, Seeds, Toggles};
pub use losses::{ip_loss, supervised_loss, unsup_loss, Components};
pub use run::{
    generate_data, partition, read_metrics, step_inputs, train, write_metrics, EpochMetrics, Partition, RunOutput,
};
pub use step::{
    decide, record_objective, sgd_update, train_step, weak_branch, Decisions, StepInputs, StepRecord, StepSeeds,
    Terms, TrainState,
};

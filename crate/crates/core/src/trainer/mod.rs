//! Two-stage pre-training: configuration, optimizer, checkpoints, data
//! loading, the per-step objective and the stage driver.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod optim;
pub mod run;
pub mod step;

pub use checkpoint::Checkpoint;
pub use config::{DataConfig, RunConfig, StageConfig};
pub use data::{ClipSource, Manifest, ManifestEntry, ManifestSource};
pub use optim::{adamw_step, cosine_lr, AdamConfig, AdamState};
pub use run::{run_stage, RunOptions, RunSummary};
pub use step::{compute_step, prepare_step, train_step, train_step_stage1, train_step_stage2, PreparedStep, StepOutcome, TrainState};

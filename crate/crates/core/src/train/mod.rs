//! Stage-2 training: frozen priors, Adam with a plateau schedule,
//! evaluation, and the baseline-versus-gated comparison harness.

mod compare;
mod config;
mod optim;
mod rundir;
mod samples;
mod stage2;

pub use compare::{compare_models, median, run_arm, run_arms, Arm, ArmSummary, ComparisonTable, ExperimentData, SeedResult};
pub use config::{PriorSource, RunConfig, TrainConfig};
pub use optim::{clip_grad_norm, Adam, PlateauSchedule};
pub use rundir::{RunDir, RUN_DIR_ENV};
pub use samples::{
    attach_prior, attach_priors, prepare_from_dataset, prepare_in_memory, PriorProvider, PriorSettings, Sample,
};
pub use stage2::{
    evaluate, mask_detections, train_stage2, validate, EpochRecord, Evaluation, History, Prediction, TrainOutcome,
};

//! Staged tuning: per-stage freezing, Adam, learning-rate schedules, the
//! synthetic bimodal dataset and the run pipeline.

pub mod data;
pub mod optim;
pub mod pipeline;
pub mod schedule;
pub mod stage;

pub use data::{make_synthetic_dataset, SyntheticConfig, SyntheticDataset, SyntheticSample, TrainBatch};
pub use optim::{Adam, AdamConfig};
pub use pipeline::{ablation_row, advance, apply_axis, run_direct_sparse, AblationAxis, AblationRow, RunConfig};
pub use schedule::{cosine_lr, Schedule};
pub use stage::{evaluate, loss_on, run_stage, PassStats, Stage, StageReport, StageSpec, StepMetrics, TunedSubset};

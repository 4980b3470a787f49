//! Advantage datasets, the squared advantage-regression objective, its exact
//! per-state KKT solution, and the iterative driver.

mod dataset;
mod iterate;
mod kkt;
mod train;

pub use dataset::{
    build_advantage_dataset, ActionMode, AdvantageDataset, AdvantageRecord, AdvantageSource, DatasetConfig,
    StateWeighting, SuccessorValues,
};
pub use iterate::{iterate_dapo, run_iteration, IterationOutcome, PipelineConfig, StateSelection};
pub use kkt::{solve_exact_dapo, solve_exact_policy, DapoSolution, KktSolution};
pub use train::{dapo_gradient, dapo_loss, train_policy, Batching, TrainConfig, TrainedPolicy};

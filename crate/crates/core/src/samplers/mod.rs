//! PMC update rules, annealing schedule and the batch runner.

mod runner;
mod schedule;
mod step;

pub use runner::{
    read_matrix_csv, run_batch, run_batch_observed, write_matrix_csv, BatchMetadata, ChainConfig, ChainState,
    Discretization, Divergence, SampleBatch, TrajectoryRecord,
};
pub use schedule::AnnealingSchedule;
pub use step::{pmc_pnp_step, pmc_red_step, StepParams};

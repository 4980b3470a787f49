//! Experiment configuration, end-to-end runs with hashed artifacts, and run reports.

mod config;
mod pipeline;
mod report;

pub use config::{ExperimentConfig, MdpSource, ReferenceSource};
pub use pipeline::{hash_file, run_pipeline, Artifact, RunManifest, ITERATIONS_CSV, MANIFEST_FILE};
pub use report::{report, IterationRow, RunReport, VerifyRow, VERIFY_CSV};

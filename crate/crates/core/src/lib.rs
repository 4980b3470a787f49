//! Exact direct advantage policy optimization on small step-level MDPs.
//!
//! The crate evaluates KL-regularized values by backward induction, estimates
//! values with Monte-Carlo completions, fits a tabular critic, builds advantage
//! datasets, trains tabular softmax policies on the squared advantage-regression
//! loss, solves the per-state KKT system of the population optimum, and runs
//! randomized numerical certificates for the underlying identities.

pub mod checks;
pub mod critic;
pub mod dapo;
pub mod error;
pub mod fixtures;
pub mod generator;
pub mod harness;
pub mod mdp;
pub mod policy;
pub mod rng;
pub mod values;

pub use error::{Error, Result};
pub use mdp::{ActionId, MdpFile, StateId, StepMdp, TrajectorySample};
pub use policy::TabularPolicy;
pub use values::{OptimalSolution, ValueTable};

//! Synthetic weak-feedback repair environment: bracket sequences where
//! balance is necessary but not sufficient for the intended repair.

pub mod env;
pub mod rollout;
pub mod scorer;
pub mod task;

use thiserror::Error;

pub use env::{Action, ToyEnv};
pub use rollout::{new_policy, sample_trajectory, synthetic_step_scorer, Rollout, RolloutConfig};
pub use scorer::ScorerConfig;
pub use task::{generate_splits, generate_task, read_tasks, write_tasks, ToyTask};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToyError {
    #[error("unknown symbol `{0}`")]
    BadSymbol(char),
    #[error("action after finish")]
    AfterFinish,
    #[error("reachable space has {0} sequences, limit is 10000")]
    SpaceTooLarge(usize),
    #[error("class member `{0}` fails the surface check")]
    NotNecessary(String),
    #[error("task {0} has no surface-only shortcut")]
    NoShortcut(String),
    #[error("task {0} is malformed")]
    Malformed(String),
    #[error("task file: {0}")]
    TaskFile(String),
}

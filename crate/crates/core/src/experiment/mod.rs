//! Config-driven runner wiring the toy environment, settlement, routing,
//! credit, distillation and the GRPO step into the experiment arms.

pub mod config;
pub mod eval;
pub mod metrics;
pub mod replay;
pub mod train;

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use config::{RunConfig, TaskSource, ARMS};
pub use eval::{eval_trajectories, run_eval, EvalSummary};
pub use metrics::{write_csv, MetricsRecord, MetricsWriter, RecordKind};
pub use replay::{replay, ReplayReport};
pub use train::{run_to_dir, run_training, settle_trajectory, Sinks, TrainOutput};

use crate::toyfix::{generate_splits, read_tasks, ToyError, ToyTask};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("tasks: {0}")]
    Tasks(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toy(#[from] ToyError),
    #[error(transparent)]
    Grpo(#[from] crate::grpo::GrpoError),
    #[error(transparent)]
    Distill(#[from] crate::distill::DistillError),
    #[error(transparent)]
    Schedule(#[from] crate::governance::ScheduleError),
    #[error("metrics record {index} has keys {found:?}, expected {expected:?}")]
    Schema {
        index: usize,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("parameters became non-finite at update {0}")]
    Diverged(usize),
    #[error("replay: {0}")]
    Replay(String),
}

/// Stream tags keeping rollout, judge, batch and eval randomness apart.
pub(crate) mod stream {
    pub const BATCH: u64 = 1;
    pub const ROLLOUT: u64 = 2;
    pub const JUDGE: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const DATA: u64 = 5;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for one (seed, stream, coordinates) cell.
pub(crate) fn cell_rng(seed: u64, coords: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &c in coords {
        h = splitmix(h ^ c);
    }
    ChaCha8Rng::seed_from_u64(h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<ToyTask>,
    pub eval: Vec<ToyTask>,
}

fn task_file(path: &Path) -> Result<Vec<ToyTask>, ExperimentError> {
    let f =
        File::open(path).map_err(|e| ExperimentError::Tasks(format!("{}: {e}", path.display())))?;
    Ok(read_tasks(BufReader::new(f))?)
}

/// Resolves both task sources. Counts are generated from `data.seed`; when
/// one side is a file, generated tasks avoid its sequences.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits, ExperimentError> {
    let mut rng = cell_rng(cfg.data_seed, &[stream::DATA]);
    let (train, eval) = match (&cfg.train_tasks, &cfg.eval_tasks) {
        (TaskSource::Generate(a), TaskSource::Generate(b)) => {
            generate_splits(*a, *b, cfg.task_length, &mut rng)
        }
        (TaskSource::File(a), TaskSource::File(b)) => (task_file(a)?, task_file(b)?),
        (TaskSource::File(a), TaskSource::Generate(n)) => {
            let train = task_file(a)?;
            let eval = generate_avoiding(*n, "eval", &train, cfg.task_length, &mut rng);
            (train, eval)
        }
        (TaskSource::Generate(n), TaskSource::File(b)) => {
            let eval = task_file(b)?;
            let train = generate_avoiding(*n, "train", &eval, cfg.task_length, &mut rng);
            (train, eval)
        }
    };
    let splits = Splits { train, eval };
    check_splits(&splits)?;
    Ok(splits)
}

fn generate_avoiding(
    n: usize,
    prefix: &str,
    avoid: &[ToyTask],
    len: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<ToyTask> {
    let mut seen: BTreeSet<_> = avoid.iter().map(|t| t.initial_sequence.clone()).collect();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let t = crate::toyfix::generate_task(format!("{prefix}-{:04}", out.len()), len, rng);
        if seen.insert(t.initial_sequence.clone()) {
            out.push(t);
        }
    }
    out
}

/// Both splits non-empty, every task verified, no shared initial sequence.
pub fn check_splits(splits: &Splits) -> Result<(), ExperimentError> {
    if splits.train.is_empty() {
        return Err(ExperimentError::Tasks("train split is empty".into()));
    }
    if splits.eval.is_empty() {
        return Err(ExperimentError::Tasks("eval split is empty".into()));
    }
    for t in splits.train.iter().chain(&splits.eval) {
        t.verify()?;
    }
    let train: BTreeSet<_> = splits.train.iter().map(|t| &t.initial_sequence).collect();
    if let Some(t) = splits
        .eval
        .iter()
        .find(|t| train.contains(&t.initial_sequence))
    {
        return Err(ExperimentError::Tasks(format!(
            "eval task {} also appears in the train split",
            t.id
        )));
    }
    Ok(())
}

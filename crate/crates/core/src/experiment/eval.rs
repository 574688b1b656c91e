//! Evaluation on the frozen split. The hint is never visible here.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::metrics::{rollup, TierMass};
use super::{cell_rng, stream, ExperimentError};
use crate::governance::{apply_routing, route, Handling};
use crate::policy::PolicyParams;
use crate::reward::{settle, SemanticVerdict};
use crate::toyfix::{sample_trajectory, ToyTask};
use crate::trajectory::{Role, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub trajectories: usize,
    /// Mean reward under the run's scheme with ground-truth verdicts.
    pub mean_reward: f64,
    pub tier_mass: TierMass,
    pub c_rate: f64,
    /// Fraction passing both the surface and the semantic check.
    pub s_rate: f64,
    pub mean_steps: f64,
    pub exit_composition: BTreeMap<String, f64>,
    pub compiled_before_finish: f64,
    pub mean_entropy: f64,
}

fn settle_truth(mut traj: Trajectory, cfg: &RunConfig) -> Trajectory {
    let handling = route(traj.exit_reason);
    if handling != Handling::Normal {
        return apply_routing(traj, handling);
    }
    let truth = if traj.semantic_ok {
        SemanticVerdict::Consistent
    } else {
        SemanticVerdict::Inconsistent
    };
    let s = settle(cfg.scheme, traj.surface_ok, || truth);
    traj.compile_ok = traj.surface_ok;
    traj.verdict = s.verdict;
    traj.env_reward = s.reward;
    traj.reward = s.reward;
    traj
}

/// The settled hint-free trajectories behind [`run_eval`], with whether each
/// compiled before finishing.
pub fn eval_trajectories(
    params: &PolicyParams,
    tasks: &[ToyTask],
    cfg: &RunConfig,
) -> Result<Vec<(Trajectory, bool)>, ExperimentError> {
    if tasks.is_empty() {
        return Err(ExperimentError::Tasks("eval split is empty".into()));
    }
    let rollout_cfg = cfg.rollout(false, cfg.eval_temperature);
    let cells: Vec<(usize, usize)> = (0..tasks.len())
        .flat_map(|i| (0..cfg.eval_samples).map(move |j| (i, j)))
        .collect();
    Ok(cells
        .par_iter()
        .map(|&(i, j)| {
            let mut rng = cell_rng(cfg.seed, &[stream::EVAL, i as u64, j as u64]);
            let r = sample_trajectory(params, params, &tasks[i], &rollout_cfg, &mut rng);
            (settle_truth(r.trajectory, cfg), r.compiled_before_finish)
        })
        .collect())
}

/// Samples `cfg.eval_samples` hint-free trajectories per task at
/// `cfg.eval_temperature`. Seeds depend only on the task index and sample,
/// so identical params and split give an identical summary.
pub fn run_eval(
    params: &PolicyParams,
    tasks: &[ToyTask],
    cfg: &RunConfig,
) -> Result<EvalSummary, ExperimentError> {
    let results = eval_trajectories(params, tasks, cfg)?;
    let trajs: Vec<Trajectory> = results.iter().map(|(t, _)| t.clone()).collect();
    let r = rollup(&trajs);
    let (mut ent, mut n) = (0.0, 0usize);
    for t in &trajs {
        for tok in t.tokens.iter().filter(|t| t.role == Role::Assistant) {
            if let Some(row) = tok.row {
                ent += params.entropy(row);
                n += 1;
            }
        }
    }
    let cbf = results.iter().filter(|(_, c)| *c).count() as f64 / results.len() as f64;
    Ok(EvalSummary {
        trajectories: r.trajectories,
        mean_reward: r.mean_reward,
        tier_mass: r.tier_mass,
        c_rate: r.c_rate,
        s_rate: r.s_rate,
        mean_steps: r.mean_steps,
        exit_composition: r.exit_composition,
        compiled_before_finish: cbf,
        mean_entropy: ent / n.max(1) as f64,
    })
}

//! The training loop: parallel rollouts, then settlement, routing, shaping,
//! grouping and one gradient step as a sequential barrier per update.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::RunConfig;
use super::eval::run_eval;
use super::metrics::{rollup, write_csv, MetricsRecord, MetricsWriter, RecordKind};
use super::replay::{
    shaped_reward, token_advantages, CopyKind, CopyRecord, GroupRecord, MemberRecord, ReplayHeader,
    ReplayLine, UpdateRecord,
};
use super::{cell_rng, load_splits, stream, ExperimentError, Splits};
use crate::credit::effective_token_weights;
use crate::distill::{expand_batch, masked_kl, trajectory_token_kls, Mode};
use crate::governance::schedule::makespan;
use crate::governance::{apply_routing, route, schedule, Chain, Handling, PoolKind, TaskSpec};
use crate::grpo::{grpo_loss, RolloutGroup, TrajectoryTerms};
use crate::policy::PolicyParams;
use crate::reward::settle;
use crate::toyfix::{new_policy, sample_trajectory, write_tasks, ToyTask};
use crate::trajectory::{effective_mask, ActionKind, Role, Trajectory};

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: PolicyParams,
    pub records: Vec<MetricsRecord>,
}

/// Settles a sampled trajectory, or routes it when its exit is not normal.
/// The surface check always runs on the final sequence.
pub fn settle_trajectory(
    mut traj: Trajectory,
    cfg: &RunConfig,
    judge_rng: &mut ChaCha8Rng,
) -> Trajectory {
    let handling = route(traj.exit_reason);
    if handling != Handling::Normal {
        return apply_routing(traj, handling);
    }
    let truth = traj.semantic_ok;
    let s = settle(cfg.scheme, traj.surface_ok, || {
        cfg.judge.judge(truth, judge_rng).0
    });
    traj.compile_ok = traj.surface_ok;
    traj.verdict = s.verdict;
    traj.env_reward = s.reward;
    traj.reward = s.reward;
    traj
}

fn initial_params(cfg: &RunConfig) -> Result<PolicyParams, ExperimentError> {
    let fresh = new_policy();
    let Some(path) = &cfg.init_params else {
        return Ok(fresh);
    };
    let p = PolicyParams::load(path)
        .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
    let shape = |q: &PolicyParams| q.rows.iter().map(Vec::len).collect::<Vec<_>>();
    if shape(&p) != shape(&fresh) || !p.is_finite() {
        return Err(ExperimentError::Config(format!(
            "{} does not fit the policy table",
            path.display()
        )));
    }
    Ok(p)
}

fn mean_entropy(trajs: &[Trajectory], params: &PolicyParams) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for t in trajs {
        for tok in &t.tokens {
            if let (Role::Assistant, Some(row)) = (tok.role, tok.row) {
                sum += params.entropy(row);
                n += 1;
            }
        }
    }
    sum / n.max(1) as f64
}

/// Simulated wall time of the batch under the pool caps: each step is one
/// inference task followed by a sandbox or compile task.
fn simulated_makespan(trajs: &[Trajectory], cfg: &RunConfig) -> Result<f64, ExperimentError> {
    let chains: Vec<Chain> = trajs
        .iter()
        .map(|t| {
            let mut tasks = Vec::new();
            for s in &t.steps {
                tasks.push(TaskSpec {
                    pool: PoolKind::Inference,
                    duration: s.n_tokens.max(1) as u64,
                });
                let tool = match s.action {
                    ActionKind::Compile => Some((PoolKind::Compile, 3)),
                    ActionKind::View | ActionKind::Edit => Some((PoolKind::Sandbox, 1)),
                    ActionKind::Finish | ActionKind::Other => None,
                };
                if let Some((pool, duration)) = tool {
                    tasks.push(TaskSpec { pool, duration });
                }
            }
            Chain { release: 0, tasks }
        })
        .collect();
    Ok(makespan(&schedule(&chains, &cfg.pools)?) as f64)
}

fn eval_record(
    cfg: &RunConfig,
    params: &PolicyParams,
    tasks: &[ToyTask],
    update: usize,
) -> Result<MetricsRecord, ExperimentError> {
    let s = run_eval(params, tasks, cfg)?;
    Ok(MetricsRecord {
        kind: RecordKind::Eval,
        arm: cfg.arm.clone(),
        update,
        trajectories: s.trajectories,
        mean_reward: s.mean_reward,
        tier_mass: s.tier_mass,
        c_rate: s.c_rate,
        s_rate: s.s_rate,
        mean_steps: s.mean_steps,
        exit_composition: s.exit_composition,
        compiled_before_finish: s.compiled_before_finish,
        mean_entropy: s.mean_entropy,
        loss: None,
        grad_norm: None,
        kl_penalty: None,
        makespan: None,
    })
}

/// Output sinks. Metrics are always collected in memory as well.
#[derive(Default)]
pub struct Sinks<'a> {
    pub metrics: Option<&'a mut dyn Write>,
    pub replay: Option<&'a mut dyn Write>,
}

/// Runs `cfg.steps` updates on `splits`, evaluating on the frozen eval split
/// before training, every `eval_interval` updates, and after the last one.
pub fn run_training(
    cfg: &RunConfig,
    splits: &Splits,
    sinks: Sinks<'_>,
) -> Result<TrainOutput, ExperimentError> {
    cfg.validate()?;
    super::check_splits(splits)?;
    let mut params = initial_params(cfg)?;
    let reference = params.clone();
    let mode = cfg.distill.mode();
    let kl = cfg.distill.kl_config();
    let teacher_sampling = matches!(mode, Some(m) if m.mode == Mode::PiDistill);
    let rollout_cfg = cfg.rollout(teacher_sampling, cfg.temperature);

    let Sinks {
        metrics,
        mut replay,
    } = sinks;
    let mut metrics = metrics.map(MetricsWriter::new);
    let mut records = Vec::new();
    let mut emit =
        |rec: MetricsRecord, records: &mut Vec<MetricsRecord>| -> Result<(), ExperimentError> {
            if let Some(w) = metrics.as_mut() {
                w.write(&rec)?;
            }
            records.push(rec);
            Ok(())
        };
    if let Some(out) = replay.as_deref_mut() {
        let header = ReplayLine::Header(ReplayHeader {
            clip: cfg.clip,
            scores_enabled: cfg.process_scores,
            degeneracy_eps: cfg.degeneracy_eps,
            distill: mode,
            kl,
        });
        serde_json::to_writer(&mut *out, &header)?;
        out.write_all(b"\n")?;
    }

    emit(eval_record(cfg, &params, &splits.eval, 0)?, &mut records)?;
    let n_prompts = cfg.batch_prompts.min(splits.train.len());
    let k = cfg.group_size;
    for update in 1..=cfg.steps {
        let u = update as u64;
        let picked = sample(
            &mut cell_rng(cfg.seed, &[stream::BATCH, u]),
            splits.train.len(),
            n_prompts,
        )
        .into_vec();

        let cells: Vec<(usize, usize)> = (0..n_prompts)
            .flat_map(|g| (0..k).map(move |m| (g, m)))
            .collect();
        let sampled: Vec<Trajectory> = cells
            .par_iter()
            .map(|&(g, m)| {
                let task = &splits.train[picked[g]];
                let coords = [u, g as u64, m as u64];
                let mut rng = cell_rng(
                    cfg.seed,
                    &[stream::ROLLOUT, coords[0], coords[1], coords[2]],
                );
                let traj =
                    sample_trajectory(&params, &reference, task, &rollout_cfg, &mut rng).trajectory;
                let mut judge_rng =
                    cell_rng(cfg.seed, &[stream::JUDGE, coords[0], coords[1], coords[2]]);
                settle_trajectory(traj, cfg, &mut judge_rng)
            })
            .collect();

        // sequential barrier: shaping, grouping, loss and the step
        let mut batch_terms = Vec::new();
        let mut copy_meta: Vec<(usize, usize, CopyRecord)> = Vec::new();
        let mut members: Vec<Vec<MemberRecord>> = vec![Vec::new(); n_prompts];
        let (mut kl_sum, mut kl_n) = (0.0, 0usize);
        let mut settled = Vec::with_capacity(sampled.len());
        for (g, chunk) in sampled.chunks(k).enumerate() {
            let mut group = Vec::with_capacity(k);
            let mut token_kls = Vec::with_capacity(k);
            for traj in chunk {
                let mut traj = traj.clone();
                let token_kl = match &kl {
                    Some(kc) => {
                        let per = trajectory_token_kls(&traj, &params, kc, teacher_sampling)?;
                        kl_sum += masked_kl(&per, &effective_mask(&traj), kc.aggregation)?.total();
                        kl_n += 1;
                        Some(per)
                    }
                    None => None,
                };
                traj.reward = shaped_reward(&traj, token_kl.as_deref(), kl.as_ref())?;
                group.push(traj);
                token_kls.push(token_kl);
            }
            let group = RolloutGroup::new(picked[g].to_string(), group, cfg.degeneracy_eps)?;
            for (m, (traj, token_kl)) in group.trajectories.iter().zip(token_kls).enumerate() {
                let adv = group.advantages[m];
                let copies: Vec<(CopyKind, f64, Option<Trajectory>)> =
                    match (&mode, teacher_sampling) {
                        (Some(dm), true) => {
                            let e = expand_batch(traj, dm, &params, &reference)?;
                            vec![
                                (CopyKind::Student, e.student_weight, Some(e.student)),
                                (CopyKind::Teacher, e.teacher_weight, None),
                            ]
                        }
                        _ => vec![(CopyKind::Single, 1.0, None)],
                    };
                let tok_adv = token_advantages(adv, token_kl.as_deref(), kl.as_ref());
                for (kind, scale, copy_traj) in copies {
                    let t = copy_traj.as_ref().unwrap_or(traj);
                    let weights = effective_token_weights(t, adv, cfg.process_scores);
                    let terms = TrajectoryTerms::from_trajectory(
                        t,
                        &weights,
                        adv,
                        tok_adv.as_deref(),
                        scale,
                    )?;
                    let entropies = terms.terms.iter().map(|p| params.entropy(p.row)).collect();
                    copy_meta.push((
                        g,
                        m,
                        CopyRecord {
                            copy: kind,
                            scale,
                            mask: effective_mask(t),
                            weights,
                            advantage: adv,
                            token_advantages: tok_adv.clone(),
                            entropies,
                            loss: 0.0,
                            trajectory: copy_traj,
                        },
                    ));
                    batch_terms.push(terms);
                }
                members[g].push(MemberRecord {
                    trajectory: traj.clone(),
                    token_kl,
                    copies: Vec::new(),
                });
            }
            settled.extend(group.trajectories);
        }

        let out = grpo_loss(&batch_terms, &params, &cfg.clip);
        let grad_norm = out.grad.l2_norm();
        let entropy = mean_entropy(&settled, &params);

        if let Some(w) = replay.as_deref_mut() {
            for ((g, m, mut rec), loss) in copy_meta.into_iter().zip(&out.per_trajectory) {
                rec.loss = *loss;
                members[g][m].copies.push(rec);
            }
            for (g, ms) in members.into_iter().enumerate() {
                let line = ReplayLine::Group(GroupRecord {
                    update,
                    group: g,
                    members: ms,
                });
                serde_json::to_writer(&mut *w, &line)?;
                w.write_all(b"\n")?;
            }
            let line = ReplayLine::Update(UpdateRecord {
                update,
                copies: batch_terms.len(),
                loss: out.loss,
            });
            serde_json::to_writer(&mut *w, &line)?;
            w.write_all(b"\n")?;
        }

        params.add_scaled(&out.grad, -cfg.lr);
        if !params.is_finite() {
            return Err(ExperimentError::Diverged(update));
        }

        let r = rollup(&settled);
        let cbf = settled
            .iter()
            .filter(|t| t.steps.iter().any(|s| s.action == ActionKind::Compile))
            .count() as f64
            / settled.len().max(1) as f64;
        emit(
            MetricsRecord {
                kind: RecordKind::Train,
                arm: cfg.arm.clone(),
                update,
                trajectories: r.trajectories,
                mean_reward: r.mean_reward,
                tier_mass: r.tier_mass,
                c_rate: r.c_rate,
                s_rate: r.s_rate,
                mean_steps: r.mean_steps,
                exit_composition: r.exit_composition,
                compiled_before_finish: cbf,
                mean_entropy: entropy,
                loss: Some(out.loss),
                grad_norm: Some(grad_norm),
                kl_penalty: kl.map(|_| kl_sum / kl_n.max(1) as f64),
                makespan: Some(simulated_makespan(&settled, cfg)?),
            },
            &mut records,
        )?;
        if update % cfg.eval_interval == 0 || update == cfg.steps {
            emit(
                eval_record(cfg, &params, &splits.eval, update)?,
                &mut records,
            )?;
        }
    }
    Ok(TrainOutput { params, records })
}

/// Loads splits and trains, writing the resolved config, both task splits,
/// `metrics.jsonl`, `metrics.csv`, `params.json` and, when enabled,
/// `replay.jsonl` into `dir`.
pub fn run_to_dir(cfg: &RunConfig, dir: &Path) -> Result<TrainOutput, ExperimentError> {
    cfg.validate()?;
    let splits = load_splits(cfg)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    write_tasks(
        BufWriter::new(File::create(dir.join("train_tasks.jsonl"))?),
        &splits.train,
    )?;
    write_tasks(
        BufWriter::new(File::create(dir.join("eval_tasks.jsonl"))?),
        &splits.eval,
    )?;
    let mut metrics = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    let mut replay = if cfg.record_replay {
        Some(BufWriter::new(File::create(dir.join("replay.jsonl"))?))
    } else {
        None
    };
    let out = run_training(
        cfg,
        &splits,
        Sinks {
            metrics: Some(&mut metrics),
            replay: replay.as_mut().map(|w| w as &mut dyn Write),
        },
    )?;
    metrics.flush()?;
    if let Some(mut w) = replay {
        w.flush()?;
    }
    write_csv(
        BufWriter::new(File::create(dir.join("metrics.csv"))?),
        &out.records,
    )?;
    out.params.save(&dir.join("params.json"))?;
    Ok(out)
}

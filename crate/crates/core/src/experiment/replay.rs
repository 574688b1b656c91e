//! Replay files: the training-time inputs and outputs of every loss copy,
//! and an independent recomputation that checks them.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::credit::effective_token_weights;
use crate::distill::{masked_kl, Aggregation, DistillMode, KlConfig};
use crate::governance::{route, Handling};
use crate::grpo::{group_advantages, loss_from_logps, ClipConfig, TrajectoryTerms};
use crate::trajectory::{effective_mask, Trajectory};

pub const TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayHeader {
    pub clip: ClipConfig,
    pub scores_enabled: bool,
    pub degeneracy_eps: f64,
    pub distill: Option<DistillMode>,
    pub kl: Option<KlConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopyKind {
    Single,
    Student,
    Teacher,
}

/// One loss copy of a member. `trajectory` is present only when the copy
/// differs from the sampled trajectory (the student copy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopyRecord {
    pub copy: CopyKind,
    pub scale: f64,
    pub trajectory: Option<Trajectory>,
    pub mask: Vec<u8>,
    pub weights: Vec<f64>,
    pub advantage: f64,
    pub token_advantages: Option<Vec<f64>>,
    /// Row entropy of each loss term at update time.
    pub entropies: Vec<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    /// Settled, routed and shaped trajectory.
    pub trajectory: Trajectory,
    pub token_kl: Option<Vec<f64>>,
    pub copies: Vec<CopyRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub update: usize,
    pub group: usize,
    pub members: Vec<MemberRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub update: usize,
    pub copies: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReplayLine {
    Header(ReplayHeader),
    Group(GroupRecord),
    Update(UpdateRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub update: usize,
    pub group: usize,
    pub member: Option<usize>,
    pub copy: Option<CopyKind>,
    pub field: String,
    pub token: Option<usize>,
    pub stored: f64,
    pub recomputed: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReplayReport {
    pub updates: usize,
    pub groups: usize,
    pub copies: usize,
    /// Largest absolute gap between a stored and a recomputed loss.
    pub max_loss_diff: f64,
    pub mismatches: Vec<Mismatch>,
}

impl ReplayReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Reward the trajectory should carry after shaping.
pub(crate) fn shaped_reward(
    traj: &Trajectory,
    token_kl: Option<&[f64]>,
    kl: Option<&KlConfig>,
) -> Result<f64, ExperimentError> {
    let (Some(kl), Some(per_token)) = (kl, token_kl) else {
        return Ok(traj.env_reward);
    };
    if route(traj.exit_reason) != Handling::Normal
        || kl.aggregation == Aggregation::PerTokenInAdvantage
    {
        return Ok(traj.env_reward);
    }
    let total = masked_kl(per_token, &effective_mask(traj), kl.aggregation)?.total();
    Ok(traj.env_reward - kl.beta * total)
}

pub(crate) fn token_advantages(
    advantage: f64,
    token_kl: Option<&[f64]>,
    kl: Option<&KlConfig>,
) -> Option<Vec<f64>> {
    match (kl, token_kl) {
        (Some(kl), Some(per_token)) if kl.aggregation == Aggregation::PerTokenInAdvantage => {
            Some(per_token.iter().map(|k| advantage - kl.beta * k).collect())
        }
        _ => None,
    }
}

/// Current log-probabilities of the tokens that become loss terms.
pub(crate) fn term_logps(traj: &Trajectory, weights: &[f64]) -> Vec<f64> {
    traj.tokens
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w != 0.0)
        .map(|(t, _)| t.logp_current)
        .collect()
}

struct Checker<'a> {
    report: &'a mut ReplayReport,
    update: usize,
    group: usize,
    member: Option<usize>,
    copy: Option<CopyKind>,
}

impl Checker<'_> {
    fn scalar(&mut self, field: &str, stored: f64, recomputed: f64) -> bool {
        let same =
            (stored - recomputed).abs() <= TOLERANCE || (stored.is_nan() && recomputed.is_nan());
        if !same {
            self.push(field, None, stored, recomputed);
        }
        same
    }

    fn vector(&mut self, field: &str, stored: &[f64], recomputed: &[f64]) -> bool {
        if stored.len() != recomputed.len() {
            self.push(
                &format!("{field}.len"),
                None,
                stored.len() as f64,
                recomputed.len() as f64,
            );
            return false;
        }
        match stored
            .iter()
            .zip(recomputed)
            .position(|(a, b)| (a - b).abs() > TOLERANCE)
        {
            Some(t) => {
                self.push(field, Some(t), stored[t], recomputed[t]);
                false
            }
            None => true,
        }
    }

    fn push(&mut self, field: &str, token: Option<usize>, stored: f64, recomputed: f64) {
        self.report.mismatches.push(Mismatch {
            update: self.update,
            group: self.group,
            member: self.member,
            copy: self.copy,
            field: field.to_string(),
            token,
            stored,
            recomputed,
        });
    }
}

fn check_group(
    header: &ReplayHeader,
    g: &GroupRecord,
    report: &mut ReplayReport,
) -> Result<Vec<f64>, ExperimentError> {
    let kl = header.kl.as_ref();
    let mut ck = Checker {
        report,
        update: g.update,
        group: g.group,
        member: None,
        copy: None,
    };
    let mut rewards = Vec::with_capacity(g.members.len());
    for (m, member) in g.members.iter().enumerate() {
        ck.member = Some(m);
        let r = shaped_reward(&member.trajectory, member.token_kl.as_deref(), kl)?;
        ck.scalar("reward", member.trajectory.reward, r);
        rewards.push(r);
    }
    let advantages = group_advantages(&rewards, header.degeneracy_eps)?;
    let mut losses = Vec::new();
    for (m, member) in g.members.iter().enumerate() {
        ck.member = Some(m);
        for c in &member.copies {
            ck.copy = Some(c.copy);
            let traj = c.trajectory.as_ref().unwrap_or(&member.trajectory);
            let adv = advantages[m];
            ck.scalar("advantage", c.advantage, adv);
            let mask: Vec<f64> = effective_mask(traj).iter().map(|&b| f64::from(b)).collect();
            let stored_mask: Vec<f64> = c.mask.iter().map(|&b| f64::from(b)).collect();
            ck.vector("mask", &stored_mask, &mask);
            let weights = effective_token_weights(traj, adv, header.scores_enabled);
            ck.vector("weights", &c.weights, &weights);
            let tok_adv = token_advantages(adv, member.token_kl.as_deref(), kl);
            if let (Some(s), Some(r)) = (&c.token_advantages, &tok_adv) {
                ck.vector("token_advantages", s, r);
            } else if c.token_advantages.is_some() != tok_adv.is_some() {
                ck.push("token_advantages", None, f64::NAN, f64::NAN);
            }
            let terms =
                TrajectoryTerms::from_trajectory(traj, &weights, adv, tok_adv.as_deref(), c.scale)?;
            let lps = term_logps(traj, &weights);
            let loss = loss_from_logps(
                &[terms],
                &[lps],
                std::slice::from_ref(&c.entropies),
                &header.clip,
            )[0];
            ck.report.max_loss_diff = ck.report.max_loss_diff.max((loss - c.loss).abs());
            ck.scalar("loss", c.loss, loss);
            ck.report.copies += 1;
            losses.push(loss);
        }
        ck.copy = None;
    }
    Ok(losses)
}

/// Recomputes rewards, advantages, masks, weights and losses from a replay
/// file and compares them with the stored values at [`TOLERANCE`].
pub fn replay<R: BufRead>(input: R) -> Result<ReplayReport, ExperimentError> {
    let mut report = ReplayReport::default();
    let mut header: Option<ReplayHeader> = None;
    let mut pending: Vec<f64> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ReplayLine = serde_json::from_str(&line)
            .map_err(|e| ExperimentError::Replay(format!("line {}: {e}", i + 1)))?;
        match parsed {
            ReplayLine::Header(h) => header = Some(h),
            ReplayLine::Group(g) => {
                let h = header
                    .as_ref()
                    .ok_or_else(|| ExperimentError::Replay("group record before header".into()))?;
                pending.extend(check_group(h, &g, &mut report)?);
                report.groups += 1;
            }
            ReplayLine::Update(u) => {
                let n = pending.len().max(1) as f64;
                let loss = pending.iter().sum::<f64>() / n;
                if pending.len() != u.copies {
                    return Err(ExperimentError::Replay(format!(
                        "update {} stores {} copies, file holds {}",
                        u.update,
                        u.copies,
                        pending.len()
                    )));
                }
                Checker {
                    report: &mut report,
                    update: u.update,
                    group: 0,
                    member: None,
                    copy: None,
                }
                .scalar("batch_loss", u.loss, loss);
                report.max_loss_diff = report.max_loss_diff.max((loss - u.loss).abs());
                report.updates += 1;
                pending.clear();
            }
        }
    }
    if header.is_none() {
        return Err(ExperimentError::Replay("missing header".into()));
    }
    Ok(report)
}

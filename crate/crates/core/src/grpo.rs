//! Group-relative advantages and the clipped, token-weighted policy loss.
//!
//! The loss for one trajectory `k` is
//!
//! ```text
//! L_k = scale_k / max(1, Σ_t m'_t) · Σ_t w_t · ( −min(ρ_t A_t, clip(ρ_t) A_t)
//!                                                + λ_KL · kl_t − c_H · H_t )
//! ```
//!
//! where `m'` is the routed mask, `w_t = m'_t α_{i(t)}`, and the batch loss is
//! the unweighted mean of `L_k` over trajectories. Gradients are analytic for
//! the tabular softmax policy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{PolicyParams, RowId};
use crate::trajectory::{effective_mask, Trajectory};

pub const DEFAULT_GROUP_SIZE: usize = 8;
pub const DEGENERACY_EPS: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum GrpoError {
    #[error("group of size {0} cannot be normalized (need K >= 2)")]
    GroupTooSmall(usize),
    #[error("trajectory {index} has {weights} weights for {tokens} tokens")]
    WeightLength {
        index: usize,
        weights: usize,
        tokens: usize,
    },
    #[error("token {token} carries weight but has no policy row")]
    MissingRow { token: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub eps_lo: f64,
    pub eps_hi: f64,
    pub kl_coef: f64,
    pub entropy_coef: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            eps_lo: 0.2,
            eps_hi: 0.28,
            kl_coef: 0.01,
            entropy_coef: 0.0,
        }
    }
}

/// `Â_k = (R_k − R̄) / std(R)` with the population std. Groups whose std
/// falls below `eps` get all-zero advantages.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>, GrpoError> {
    let k = rewards.len();
    if k < 2 {
        return Err(GrpoError::GroupTooSmall(k));
    }
    let mean = rewards.iter().sum::<f64>() / k as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / k as f64;
    let std = var.sqrt();
    if std < eps {
        return Ok(vec![0.0; k]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

pub fn clipped_term(rho: f64, advantage: f64, cfg: &ClipConfig) -> f64 {
    let clipped = rho.clamp(1.0 - cfg.eps_lo, 1.0 + cfg.eps_hi);
    (rho * advantage).min(clipped * advantage)
}

/// `r − ln r − 1` with `r = π_ref / π`, evaluated from log-probabilities.
pub fn low_var_kl(logp_cur: f64, logp_ref: f64) -> f64 {
    let log_r = logp_ref - logp_cur;
    // exp_m1 keeps the estimate nonnegative near r = 1
    (log_r.exp_m1() - log_r).max(0.0)
}

/// K same-prompt trajectories and their advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub prompt_id: String,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    /// Normalizes the settled rewards of `trajectories`. Routed trajectories
    /// stay in the group so `K` is fixed.
    pub fn new(
        prompt_id: impl Into<String>,
        trajectories: Vec<Trajectory>,
        eps: f64,
    ) -> Result<Self, GrpoError> {
        let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward).collect();
        let advantages = group_advantages(&rewards, eps)?;
        Ok(Self {
            prompt_id: prompt_id.into(),
            trajectories,
            rewards,
            advantages,
        })
    }

    pub fn k(&self) -> usize {
        self.trajectories.len()
    }
}

/// One weighted token in the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyTerm {
    pub row: RowId,
    pub token: u32,
    pub logp_old: f64,
    pub logp_ref: f64,
    pub weight: f64,
    pub advantage: f64,
}

/// The loss-relevant view of one trajectory (or one batch-expansion copy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryTerms {
    pub terms: Vec<PolicyTerm>,
    /// `max(1, Σ_t m'_t)`.
    pub normalizer: f64,
    /// Copy weight; 1 outside batch expansion.
    pub scale: f64,
}

impl TrajectoryTerms {
    /// Collects tokens with nonzero weight. `token_advantages`, when given,
    /// replaces the broadcast trajectory advantage per token.
    pub fn from_trajectory(
        trajectory: &Trajectory,
        weights: &[f64],
        advantage: f64,
        token_advantages: Option<&[f64]>,
        scale: f64,
    ) -> Result<Self, GrpoError> {
        if weights.len() != trajectory.tokens.len() {
            return Err(GrpoError::WeightLength {
                index: 0,
                weights: weights.len(),
                tokens: trajectory.tokens.len(),
            });
        }
        let active: u64 = effective_mask(trajectory).iter().map(|&m| m as u64).sum();
        let mut terms = Vec::new();
        for (t, (tok, &w)) in trajectory.tokens.iter().zip(weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            let row = tok.row.ok_or(GrpoError::MissingRow { token: t })?;
            terms.push(PolicyTerm {
                row,
                token: tok.token_id,
                logp_old: tok.logp_old,
                logp_ref: tok.logp_ref,
                weight: w,
                advantage: token_advantages.map_or(advantage, |a| a[t]),
            });
        }
        Ok(Self {
            terms,
            normalizer: (active as f64).max(1.0),
            scale,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: PolicyParams,
    /// Batch mean of the normalized clipped surrogate (before negation).
    pub surrogate: f64,
    /// Batch mean of the normalized KL term.
    pub kl: f64,
    pub per_trajectory: Vec<f64>,
}

/// Per-token contribution to the loss, before weight and normalizer.
fn term_value(term: &PolicyTerm, logp_cur: f64, entropy: f64, cfg: &ClipConfig) -> (f64, f64, f64) {
    let rho = (logp_cur - term.logp_old).exp();
    let surrogate = clipped_term(rho, term.advantage, cfg);
    let kl = low_var_kl(logp_cur, term.logp_ref);
    (
        -surrogate + cfg.kl_coef * kl - cfg.entropy_coef * entropy,
        surrogate,
        kl,
    )
}

/// Loss and analytic gradient at `params`. Contributions are accumulated in
/// batch order.
pub fn grpo_loss(batch: &[TrajectoryTerms], params: &PolicyParams, cfg: &ClipConfig) -> LossOutput {
    let mut grad = PolicyParams::zeros_like(params);
    let mut per_trajectory = Vec::with_capacity(batch.len());
    let (mut sur_sum, mut kl_sum) = (0.0, 0.0);
    let n = batch.len().max(1) as f64;
    for traj in batch {
        let coef = traj.scale / traj.normalizer;
        let (mut acc, mut sur, mut kl_acc) = (0.0, 0.0, 0.0);
        for term in &traj.terms {
            let lp = params.log_probs(term.row);
            let logp_cur = lp[term.token as usize];
            let entropy: f64 = lp.iter().map(|l| -l.exp() * l).sum();
            let (value, s, kl) = term_value(term, logp_cur, entropy, cfg);
            acc += term.weight * value;
            sur += term.weight * s;
            kl_acc += term.weight * kl;

            let rho = (logp_cur - term.logp_old).exp();
            let clipped = rho.clamp(1.0 - cfg.eps_lo, 1.0 + cfg.eps_hi);
            let d_sur = if rho * term.advantage <= clipped * term.advantage {
                rho * term.advantage
            } else {
                0.0
            };
            let r = (term.logp_ref - logp_cur).exp();
            // d(loss)/d(logp_cur) for the ratio and KL parts
            let d_logp = -d_sur + cfg.kl_coef * (1.0 - r);
            let scale = coef * term.weight / n;
            let g = &mut grad.rows[term.row as usize];
            for (j, l) in lp.iter().enumerate() {
                let p = l.exp();
                let onehot = if j == term.token as usize { 1.0 } else { 0.0 };
                let mut d = d_logp * (onehot - p);
                if cfg.entropy_coef != 0.0 {
                    // dH/dz_j = −p_j (ln p_j + H)
                    d += cfg.entropy_coef * p * (l + entropy);
                }
                g[j] += scale * d;
            }
        }
        per_trajectory.push(coef * acc);
        sur_sum += coef * sur;
        kl_sum += coef * kl_acc;
    }
    LossOutput {
        loss: per_trajectory.iter().sum::<f64>() / n,
        grad,
        surrogate: sur_sum / n,
        kl: kl_sum / n,
        per_trajectory,
    }
}

/// Per-trajectory loss from stored current log-probabilities and row
/// entropies, each aligned with the trajectory's terms. Missing entropies
/// count as zero.
pub fn loss_from_logps(
    batch: &[TrajectoryTerms],
    logp_current: &[Vec<f64>],
    entropies: &[Vec<f64>],
    cfg: &ClipConfig,
) -> Vec<f64> {
    batch
        .iter()
        .enumerate()
        .map(|(k, traj)| {
            let coef = traj.scale / traj.normalizer;
            let ent = entropies.get(k).map(Vec::as_slice).unwrap_or(&[]);
            let acc: f64 = traj
                .terms
                .iter()
                .zip(&logp_current[k])
                .enumerate()
                .map(|(i, (term, &lp))| {
                    let h = ent.get(i).copied().unwrap_or(0.0);
                    term.weight * term_value(term, lp, h, cfg).0
                })
                .sum();
            coef * acc
        })
        .collect()
}

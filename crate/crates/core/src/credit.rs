//! Step-level process credit.
//!
//! A step score `s_i` becomes a multiplier `α_i` relative to the
//! token-weighted trajectory mean `s̄`. The multiplier redistributes loss mass
//! across steps without changing its total: `Σ n_i α_i = Σ n_i`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{effective_mask, Trajectory};

/// Lower bound on a raw negative-branch weight before normalization.
pub const NEGATIVE_FLOOR: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum CreditError {
    #[error("{scores} scores for {counts} step counts")]
    LengthMismatch { scores: usize, counts: usize },
    #[error("step {step}: score {score} outside [0, 1]")]
    ScoreRange { step: usize, score: f64 },
    #[error("no active assistant tokens")]
    NoActiveTokens,
    #[error("token {token} is active but step {step} has no weight")]
    MissingAlpha { token: usize, step: usize },
    #[error("mask has {mask} entries but {steps} step indices were given")]
    MaskLength { mask: usize, steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Positive,
    Negative,
    Neutral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvantageSign {
    Positive,
    Negative,
}

impl AdvantageSign {
    /// `None` for a zero advantage, which always takes the neutral branch.
    pub fn of(advantage: f64) -> Option<Self> {
        if advantage > 0.0 {
            Some(Self::Positive)
        } else if advantage < 0.0 {
            Some(Self::Negative)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepWeights {
    pub alpha: Vec<f64>,
    pub branch: Branch,
}

impl StepWeights {
    pub fn neutral(num_steps: usize) -> Self {
        Self {
            alpha: vec![1.0; num_steps],
            branch: Branch::Neutral,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Eligibility {
    ApplyScores,
    Neutral,
}

fn check(s: &[f64], n: &[usize]) -> Result<usize, CreditError> {
    if s.len() != n.len() {
        return Err(CreditError::LengthMismatch {
            scores: s.len(),
            counts: n.len(),
        });
    }
    if let Some((step, &score)) = s
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(CreditError::ScoreRange { step, score });
    }
    let total: usize = n.iter().sum();
    if total == 0 {
        return Err(CreditError::NoActiveTokens);
    }
    Ok(total)
}

/// `s̄ = Σ n_i s_i / Σ n_i`.
pub fn mean_score(s: &[f64], n: &[usize]) -> Result<f64, CreditError> {
    let total = check(s, n)?;
    let num: f64 = s.iter().zip(n).map(|(s, &n)| n as f64 * s).sum();
    Ok(num / total as f64)
}

/// Per-step multipliers for a trajectory with the given advantage sign.
///
/// Positive: `α_i = s_i / s̄`. Negative: `α_i = c · max(2 − s_i / s̄, 0.1)`
/// with `c` restoring `Σ n_i α_i = Σ n_i`. An all-zero score vector
/// (`s̄ = 0`) falls back to the neutral branch.
pub fn step_weights(
    s: &[f64],
    n: &[usize],
    sign: AdvantageSign,
) -> Result<StepWeights, CreditError> {
    let total = check(s, n)? as f64;
    let mean = mean_score(s, n)?;
    if mean <= 0.0 {
        return Ok(StepWeights::neutral(s.len()));
    }
    let positive: Vec<f64> = s.iter().map(|v| v / mean).collect();
    match sign {
        AdvantageSign::Positive => Ok(StepWeights {
            alpha: positive,
            branch: Branch::Positive,
        }),
        AdvantageSign::Negative => {
            let raw: Vec<f64> = positive
                .iter()
                .map(|a| (2.0 - a).max(NEGATIVE_FLOOR))
                .collect();
            let mass: f64 = raw.iter().zip(n).map(|(r, &n)| r * n as f64).sum();
            let c = total / mass;
            Ok(StepWeights {
                alpha: raw.iter().map(|r| c * r).collect(),
                branch: Branch::Negative,
            })
        }
    }
}

/// `w_t = m_t · α_{i(t)}`.
pub fn token_weights(
    weights: &StepWeights,
    mask: &[u8],
    step_index: &[usize],
) -> Result<Vec<f64>, CreditError> {
    if mask.len() != step_index.len() {
        return Err(CreditError::MaskLength {
            mask: mask.len(),
            steps: step_index.len(),
        });
    }
    mask.iter()
        .zip(step_index)
        .enumerate()
        .map(|(t, (&m, &i))| {
            if m == 0 {
                return Ok(0.0);
            }
            weights
                .alpha
                .get(i)
                .map(|a| f64::from(m) * a)
                .ok_or(CreditError::MissingAlpha { token: t, step: i })
        })
        .collect()
}

/// Scores apply only to compiled trajectories whose every step carries a
/// valid score.
pub fn eligibility_gate(trajectory: &Trajectory) -> Eligibility {
    let valid = !trajectory.steps.is_empty()
        && trajectory
            .steps
            .iter()
            .all(|s| matches!(s.score, Some(v) if (0.0..=1.0).contains(&v)));
    if trajectory.compile_ok && valid {
        Eligibility::ApplyScores
    } else {
        Eligibility::Neutral
    }
}

/// Routed mask times step multipliers for one trajectory.
///
/// Falls back to the plain routed mask when scores are disabled, the
/// trajectory is ineligible, the advantage is zero, or no token is active.
pub fn effective_token_weights(
    trajectory: &Trajectory,
    advantage: f64,
    scores_enabled: bool,
) -> Vec<f64> {
    let mask = effective_mask(trajectory);
    let steps = trajectory.step_indices();
    let neutral = || mask.iter().map(|&m| f64::from(m)).collect();
    if !scores_enabled || eligibility_gate(trajectory) == Eligibility::Neutral {
        return neutral();
    }
    let Some(sign) = AdvantageSign::of(advantage) else {
        return neutral();
    };
    let mut n = vec![0usize; trajectory.steps.len()];
    for (&m, &i) in mask.iter().zip(&steps) {
        n[i] += m as usize;
    }
    let s: Vec<f64> = trajectory
        .steps
        .iter()
        .map(|st| st.score.unwrap_or(1.0))
        .collect();
    match step_weights(&s, &n, sign) {
        Ok(w) => token_weights(&w, &mask, &steps).unwrap_or_else(|_| neutral()),
        Err(_) => neutral(),
    }
}

//! Trajectory-level reward settlement.
//!
//! Three schemes share one compile check and one semantic judge:
//! layered `{0, 0.5, 1}`, compile-only `{0, 1}` and binary `{0, 1}`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticVerdict {
    Consistent,
    Inconsistent,
    Skipped,
    JudgeError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardScheme {
    #[default]
    Layered,
    CompileOnly,
    Binary,
}

impl FromStr for RewardScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "layered" => Ok(Self::Layered),
            "compile_only" => Ok(Self::CompileOnly),
            "binary" => Ok(Self::Binary),
            other => Err(format!(
                "unknown reward scheme `{other}` (expected layered, compile_only or binary)"
            )),
        }
    }
}

impl fmt::Display for RewardScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Layered => "layered",
            Self::CompileOnly => "compile_only",
            Self::Binary => "binary",
        })
    }
}

/// Weight of each tier in the layered scheme.
pub const TIER: f64 = 0.5;

pub fn settle_layered(compile_ok: bool, verdict: SemanticVerdict) -> f64 {
    if !compile_ok {
        return 0.0;
    }
    match verdict {
        SemanticVerdict::Consistent => 2.0 * TIER,
        SemanticVerdict::Inconsistent | SemanticVerdict::Skipped | SemanticVerdict::JudgeError => {
            TIER
        }
    }
}

pub fn settle_compile_only(compile_ok: bool) -> f64 {
    if compile_ok {
        1.0
    } else {
        0.0
    }
}

pub fn settle_binary(compile_ok: bool, verdict: SemanticVerdict) -> f64 {
    if compile_ok && verdict == SemanticVerdict::Consistent {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Settlement {
    pub reward: f64,
    /// `None` when the judge was never consulted.
    pub verdict: Option<SemanticVerdict>,
}

/// Settles a reward under `scheme`. The judge closure runs only after a
/// successful compile, and never under the compile-only scheme.
pub fn settle<F>(scheme: RewardScheme, compile_ok: bool, judge: F) -> Settlement
where
    F: FnOnce() -> SemanticVerdict,
{
    if !compile_ok || scheme == RewardScheme::CompileOnly {
        return Settlement {
            reward: settle_compile_only(compile_ok),
            verdict: None,
        };
    }
    let verdict = judge();
    let reward = match scheme {
        RewardScheme::Layered => settle_layered(true, verdict),
        RewardScheme::Binary => settle_binary(true, verdict),
        RewardScheme::CompileOnly => unreachable!(),
    };
    Settlement {
        reward,
        verdict: Some(verdict),
    }
}

/// One draw from a judge with the given sensitivity and specificity.
pub fn noisy_judge<R: Rng + ?Sized>(
    true_semantic: bool,
    sensitivity: f64,
    specificity: f64,
    rng: &mut R,
) -> SemanticVerdict {
    let u: f64 = rng.random();
    let says_consistent = if true_semantic {
        u < sensitivity
    } else {
        u < 1.0 - specificity
    };
    if says_consistent {
        SemanticVerdict::Consistent
    } else {
        SemanticVerdict::Inconsistent
    }
}

/// Synthetic semantic judge with optional transient faults and a retry budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticJudge {
    pub sensitivity: f64,
    pub specificity: f64,
    /// Probability that a single call fails transiently. Zero unless fault
    /// injection is wanted.
    pub fault_rate: f64,
    /// Attempts after the first failure (2 during training, 5 at evaluation).
    pub retries: u32,
}

impl Default for SyntheticJudge {
    fn default() -> Self {
        Self {
            sensitivity: 1.0,
            specificity: 1.0,
            fault_rate: 0.0,
            retries: 2,
        }
    }
}

impl SyntheticJudge {
    /// Audited operating point of the reference judge.
    pub fn audited() -> Self {
        Self {
            sensitivity: 0.917,
            specificity: 0.885,
            ..Self::default()
        }
    }

    /// Returns the verdict and the number of attempts used. Exhausted retries
    /// surface as [`SemanticVerdict::JudgeError`].
    pub fn judge<R: Rng + ?Sized>(
        &self,
        true_semantic: bool,
        rng: &mut R,
    ) -> (SemanticVerdict, u32) {
        for attempt in 0..=self.retries {
            if self.fault_rate > 0.0 && rng.random::<f64>() < self.fault_rate {
                continue;
            }
            let v = noisy_judge(true_semantic, self.sensitivity, self.specificity, rng);
            return (v, attempt + 1);
        }
        (SemanticVerdict::JudgeError, self.retries + 1)
    }
}

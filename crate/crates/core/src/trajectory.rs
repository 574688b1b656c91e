//! Trajectories, steps and the assistant-only mask.
//!
//! A trajectory is a flat token stream partitioned into steps. Each step owns
//! a contiguous assistant span followed by a contiguous echo span. Only
//! assistant tokens (`m_t = 1`) ever carry loss weight; echo tokens keep the
//! same record layout so that one schema covers the whole stream.

use std::io::{BufRead, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::governance::ExitReason;
use crate::policy::RowId;
use crate::reward::SemanticVerdict;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("token {token} has role {found:?} inside the {span} span of step {step}")]
    RoleSpanMismatch {
        step: usize,
        token: usize,
        span: &'static str,
        found: Role,
    },
    #[error("token {token} is not covered by any step")]
    Uncovered { token: usize },
    #[error("token {token} is covered by more than one step")]
    Overlap { token: usize },
    #[error("token {token} has step_index {found}, expected {expected}")]
    StepIndex {
        token: usize,
        found: usize,
        expected: usize,
    },
    #[error("step {step}: stored n_i = {stored} but the span holds {counted} assistant tokens")]
    CountMismatch {
        step: usize,
        stored: usize,
        counted: usize,
    },
    #[error("step {step}: process score {score} outside [0, 1]")]
    ScoreRange { step: usize, score: f64 },
    #[error("loss mask override has length {found}, expected {expected}")]
    OverrideLength { found: usize, expected: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Generated by the policy, `m_t = 1`.
    Assistant,
    /// Environment echo, `m_t = 0`.
    Echo,
}

impl Role {
    pub fn mask_bit(self) -> u8 {
        match self {
            Role::Assistant => 1,
            Role::Echo => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub token_id: u32,
    pub role: Role,
    pub step_index: usize,
    /// Policy row the token was sampled from. `None` for echoes.
    pub row: Option<RowId>,
    /// The same context on the other side of the hint boundary: the hinted row
    /// for student samples, the hint-free row for teacher samples.
    pub counterpart_row: Option<RowId>,
    pub logp_current: f64,
    pub logp_old: f64,
    pub logp_ref: f64,
    pub logp_teacher: Option<f64>,
}

impl TokenRecord {
    pub fn echo(token_id: u32, step_index: usize) -> Self {
        Self {
            token_id,
            role: Role::Echo,
            step_index,
            row: None,
            counterpart_row: None,
            logp_current: 0.0,
            logp_old: 0.0,
            logp_ref: 0.0,
            logp_teacher: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    View,
    Edit,
    Compile,
    Finish,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub action: ActionKind,
    pub assistant_span: Range<usize>,
    pub echo_span: Range<usize>,
    /// `n_i`: assistant tokens in the step.
    pub n_tokens: usize,
    /// `s_i`: process score, when one has been assigned.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_id: String,
    pub steps: Vec<StepRecord>,
    pub tokens: Vec<TokenRecord>,
    pub exit_reason: ExitReason,
    /// Settled reward `R` after routing and any distillation shaping.
    pub reward: f64,
    /// Environment reward before distillation shaping.
    pub env_reward: f64,
    /// Settled compile result. False whenever settlement was skipped.
    pub compile_ok: bool,
    pub verdict: Option<SemanticVerdict>,
    /// Ground-truth surface predicate on the final working sequence.
    pub surface_ok: bool,
    /// Ground-truth semantic predicate on the final working sequence.
    pub semantic_ok: bool,
    pub loss_mask_override: Option<Vec<u8>>,
}

impl Trajectory {
    pub fn empty(prompt_id: impl Into<String>) -> Self {
        Self {
            prompt_id: prompt_id.into(),
            steps: Vec::new(),
            tokens: Vec::new(),
            exit_reason: ExitReason::NoToolCallStop,
            reward: 0.0,
            env_reward: 0.0,
            compile_ok: false,
            verdict: None,
            surface_ok: false,
            semantic_ok: false,
            loss_mask_override: None,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Checks the step partition, role/span agreement, stored counts, score
    /// ranges and the override length.
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let mut owner: Vec<Option<usize>> = vec![None; self.tokens.len()];
        for (i, step) in self.steps.iter().enumerate() {
            for (span, name, want) in [
                (&step.assistant_span, "assistant", Role::Assistant),
                (&step.echo_span, "echo", Role::Echo),
            ] {
                for t in span.clone() {
                    let Some(tok) = self.tokens.get(t) else {
                        return Err(TrajectoryError::Uncovered { token: t });
                    };
                    if owner[t].is_some() {
                        return Err(TrajectoryError::Overlap { token: t });
                    }
                    owner[t] = Some(i);
                    if tok.role != want {
                        return Err(TrajectoryError::RoleSpanMismatch {
                            step: i,
                            token: t,
                            span: name,
                            found: tok.role,
                        });
                    }
                }
            }
            if let Some(s) = step.score {
                if !(0.0..=1.0).contains(&s) {
                    return Err(TrajectoryError::ScoreRange { step: i, score: s });
                }
            }
        }
        for (t, (tok, own)) in self.tokens.iter().zip(&owner).enumerate() {
            let Some(step) = own else {
                return Err(TrajectoryError::Uncovered { token: t });
            };
            if tok.step_index != *step {
                return Err(TrajectoryError::StepIndex {
                    token: t,
                    found: tok.step_index,
                    expected: *step,
                });
            }
        }
        let counts = step_token_counts(self)?;
        for (i, (step, n)) in self.steps.iter().zip(counts).enumerate() {
            if step.n_tokens != n {
                return Err(TrajectoryError::CountMismatch {
                    step: i,
                    stored: step.n_tokens,
                    counted: n,
                });
            }
        }
        if let Some(o) = &self.loss_mask_override {
            if o.len() != self.tokens.len() {
                return Err(TrajectoryError::OverrideLength {
                    found: o.len(),
                    expected: self.tokens.len(),
                });
            }
        }
        Ok(())
    }

    /// Per-token owning step, as stored on the tokens.
    pub fn step_indices(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.step_index).collect()
    }
}

/// `m_t`: 1 exactly on assistant-generated tokens.
pub fn build_mask(trajectory: &Trajectory) -> Vec<u8> {
    trajectory
        .tokens
        .iter()
        .map(|t| t.role.mask_bit())
        .collect()
}

/// The routed mask: `override_t * m_t`, or `m_t` when no override is set.
pub fn effective_mask(trajectory: &Trajectory) -> Vec<u8> {
    let mask = build_mask(trajectory);
    match &trajectory.loss_mask_override {
        Some(o) => mask.iter().zip(o).map(|(m, o)| m * (*o).min(1)).collect(),
        None => mask,
    }
}

/// `n_i` for every step, recounted from the role flags inside each
/// assistant span.
pub fn step_token_counts(trajectory: &Trajectory) -> Result<Vec<usize>, TrajectoryError> {
    trajectory
        .steps
        .iter()
        .enumerate()
        .map(|(i, step)| {
            let mut n = 0;
            for t in step.assistant_span.clone() {
                let tok = trajectory
                    .tokens
                    .get(t)
                    .ok_or(TrajectoryError::Uncovered { token: t })?;
                match tok.role {
                    Role::Assistant => n += 1,
                    Role::Echo => {
                        return Err(TrajectoryError::RoleSpanMismatch {
                            step: i,
                            token: t,
                            span: "assistant",
                            found: Role::Echo,
                        })
                    }
                }
            }
            Ok(n)
        })
        .collect()
}

/// Incremental construction, one step at a time.
#[derive(Debug)]
pub struct TrajectoryBuilder {
    traj: Trajectory,
    open: Option<StepRecord>,
}

impl TrajectoryBuilder {
    pub fn new(prompt_id: impl Into<String>) -> Self {
        Self {
            traj: Trajectory::empty(prompt_id),
            open: None,
        }
    }

    /// Starts a new step. Any open step is closed first.
    pub fn begin_step(&mut self, action: ActionKind) {
        self.close_step();
        let at = self.traj.tokens.len();
        self.open = Some(StepRecord {
            action,
            assistant_span: at..at,
            echo_span: at..at,
            n_tokens: 0,
            score: None,
        });
    }

    /// Corrects the action kind once the full assistant turn is known.
    pub fn set_action(&mut self, action: ActionKind) {
        if let Some(step) = &mut self.open {
            step.action = action;
        }
    }

    pub fn current_step(&self) -> usize {
        self.traj.steps.len()
    }

    pub fn push_assistant(&mut self, mut token: TokenRecord) {
        let step = self.open.as_mut().expect("push_assistant outside a step");
        assert!(
            step.echo_span.is_empty(),
            "assistant token after echo in one step"
        );
        token.role = Role::Assistant;
        token.step_index = self.traj.steps.len();
        self.traj.tokens.push(token);
        step.assistant_span.end += 1;
        step.echo_span = step.assistant_span.end..step.assistant_span.end;
        step.n_tokens += 1;
    }

    pub fn push_echo(&mut self, token_id: u32) {
        let step = self.open.as_mut().expect("push_echo outside a step");
        let idx = self.traj.steps.len();
        self.traj.tokens.push(TokenRecord::echo(token_id, idx));
        step.echo_span.end += 1;
    }

    fn close_step(&mut self) {
        if let Some(step) = self.open.take() {
            self.traj.steps.push(step);
        }
    }

    pub fn tokens(&self) -> &[TokenRecord] {
        &self.traj.tokens
    }

    pub fn finish(mut self) -> Trajectory {
        self.close_step();
        self.traj
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize, W: Write>(mut out: W, records: &[T]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads records written by [`write_jsonl`]. Blank lines are skipped.
pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(
    input: R,
) -> Result<Vec<T>, TrajectoryError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| TrajectoryError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assistant(id: u32) -> TokenRecord {
        TokenRecord {
            role: Role::Assistant,
            row: Some(0),
            ..TokenRecord::echo(id, 0)
        }
    }

    /// Builds a trajectory whose steps have the given (assistant, echo) sizes.
    pub(crate) fn shaped(sizes: &[(usize, usize)]) -> Trajectory {
        let mut b = TrajectoryBuilder::new("p");
        for &(a, e) in sizes {
            b.begin_step(ActionKind::Other);
            for k in 0..a {
                b.push_assistant(assistant(k as u32));
            }
            for k in 0..e {
                b.push_echo(k as u32);
            }
        }
        b.finish()
    }

    #[test]
    fn mask_of_three_assistant_then_two_echo() {
        let t = shaped(&[(3, 2)]);
        assert_eq!(build_mask(&t), vec![1, 1, 1, 0, 0]);
    }

    #[test]
    fn empty_trajectory_has_empty_mask() {
        let t = Trajectory::empty("p");
        assert!(build_mask(&t).is_empty());
        assert_eq!(step_token_counts(&t).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn all_echo_mask_is_zero() {
        let t = shaped(&[(0, 3), (0, 2)]);
        assert_eq!(build_mask(&t), vec![0; 5]);
        t.validate().unwrap();
    }

    #[test]
    fn counts_follow_assistant_spans() {
        let t = shaped(&[(2, 1), (0, 2), (3, 0)]);
        assert_eq!(step_token_counts(&t).unwrap(), vec![2, 0, 3]);
        let single = shaped(&[(4, 0)]);
        assert_eq!(step_token_counts(&single).unwrap(), vec![4]);
    }

    #[test]
    fn random_counts_match_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let sizes: Vec<(usize, usize)> = (0..rng.random_range(0..8))
                .map(|_| (rng.random_range(0..5), rng.random_range(0..5)))
                .collect();
            let t = shaped(&sizes);
            t.validate().unwrap();
            let counts = step_token_counts(&t).unwrap();
            // brute-force recount over the token stream
            let mut recount = vec![0usize; t.steps.len()];
            for tok in &t.tokens {
                if tok.role == Role::Assistant {
                    recount[tok.step_index] += 1;
                }
            }
            assert_eq!(counts, recount);
            let mass: usize = build_mask(&t).iter().map(|&m| m as usize).sum();
            assert_eq!(counts.iter().sum::<usize>(), mass);
        }
    }

    #[test]
    fn flipped_role_is_malformed() {
        let mut t = shaped(&[(2, 2)]);
        t.tokens[1].role = Role::Echo;
        assert!(matches!(
            step_token_counts(&t),
            Err(TrajectoryError::RoleSpanMismatch { token: 1, .. })
        ));
        let mut t = shaped(&[(2, 2)]);
        t.tokens[3].role = Role::Assistant;
        assert!(t.validate().is_err());
    }

    #[test]
    fn override_is_dominated_by_role_mask() {
        let mut t = shaped(&[(2, 2), (1, 1)]);
        t.loss_mask_override = Some(vec![1; 6]);
        assert_eq!(effective_mask(&t), build_mask(&t));
        t.loss_mask_override = Some(vec![0, 1, 1, 1, 0, 1]);
        assert_eq!(effective_mask(&t), vec![0, 1, 0, 0, 0, 0]);
        t.loss_mask_override = Some(vec![1; 2]);
        assert!(matches!(
            t.validate(),
            Err(TrajectoryError::OverrideLength { .. })
        ));
    }

    #[test]
    fn jsonl_roundtrip() {
        let t = shaped(&[(2, 1), (1, 3)]);
        let mut buf = Vec::new();
        write_jsonl(&mut buf, std::slice::from_ref(&t)).unwrap();
        let back: Vec<Trajectory> = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, vec![t]);
    }
}

//! Rollout governance: exit classification, failure-cause routing and
//! degeneration detectors.
//!
//! Every trajectory ends with exactly one [`ExitReason`]. Routing maps the
//! reason to a [`Handling`]: normal settlement, full masking (no gradient,
//! `R = 0`), or last-step retention (only the final assistant turn stays
//! active, `R = 0`). Routed trajectories always stay in their group.

pub mod schedule;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::trajectory::{Role, Trajectory};

pub use schedule::{
    makespan, peak_occupancy, random_workload, schedule, Chain, EventKind, PoolConfig, PoolKind,
    ScheduleError, TaskSpec, TraceEvent,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitReason {
    FinishCalled,
    MaxSteps,
    NoToolCallStop,
    ContextLimit,
    Abort,
    MaxTokens,
    CatastrophicRepetition,
    ExcessiveToolCalls,
    ConsecutiveCompileTimeouts,
    EnvironmentSetupFailed,
}

impl ExitReason {
    pub const ALL: [ExitReason; 10] = [
        ExitReason::FinishCalled,
        ExitReason::MaxSteps,
        ExitReason::NoToolCallStop,
        ExitReason::ContextLimit,
        ExitReason::Abort,
        ExitReason::MaxTokens,
        ExitReason::CatastrophicRepetition,
        ExitReason::ExcessiveToolCalls,
        ExitReason::ConsecutiveCompileTimeouts,
        ExitReason::EnvironmentSetupFailed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExitReason::FinishCalled => "finish_called",
            ExitReason::MaxSteps => "max_steps",
            ExitReason::NoToolCallStop => "no_tool_call_stop",
            ExitReason::ContextLimit => "context_limit",
            ExitReason::Abort => "abort",
            ExitReason::MaxTokens => "max_tokens",
            ExitReason::CatastrophicRepetition => "catastrophic_repetition",
            ExitReason::ExcessiveToolCalls => "excessive_tool_calls",
            ExitReason::ConsecutiveCompileTimeouts => "consecutive_compile_timeouts",
            ExitReason::EnvironmentSetupFailed => "environment_setup_failed",
        }
    }
}

impl fmt::Display for ExitReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Handling {
    Normal,
    MaskAll,
    KeepLastStep,
}

pub fn route(reason: ExitReason) -> Handling {
    use ExitReason::*;
    match reason {
        ContextLimit | Abort | MaxTokens | ConsecutiveCompileTimeouts | EnvironmentSetupFailed => {
            Handling::MaskAll
        }
        CatastrophicRepetition | ExcessiveToolCalls => Handling::KeepLastStep,
        FinishCalled | MaxSteps | NoToolCallStop => Handling::Normal,
    }
}

/// Applies the routing decision. Non-normal handling forces `R = 0` and
/// marks settlement as skipped.
pub fn apply_routing(mut trajectory: Trajectory, handling: Handling) -> Trajectory {
    let n = trajectory.tokens.len();
    match handling {
        Handling::Normal => return trajectory,
        Handling::MaskAll => {
            trajectory.loss_mask_override = Some(vec![0; n]);
        }
        Handling::KeepLastStep => {
            let mut mask = vec![0u8; n];
            if let Some(step) = trajectory.steps.iter().rev().find(|s| s.n_tokens > 0) {
                for t in step.assistant_span.clone() {
                    if trajectory.tokens[t].role == Role::Assistant {
                        mask[t] = 1;
                    }
                }
            }
            trajectory.loss_mask_override = Some(mask);
        }
    }
    trajectory.reward = 0.0;
    trajectory.env_reward = 0.0;
    trajectory.compile_ok = false;
    trajectory.verdict = None;
    trajectory
}

/// Shortest and longest repeating unit the repetition detector looks for.
pub const REPETITION_UNIT: std::ops::RangeInclusive<usize> = 15..=50;
/// A unit must repeat more than this many times in a row.
pub const REPETITION_LIMIT: usize = 30;
/// An assistant turn with more tool calls than this is degenerate.
pub const MAX_TOOL_CALLS_PER_TURN: usize = 5;

/// True iff some primitive unit of 15 to 50 tokens occurs more than 30
/// times back to back in `tokens`.
///
/// A unit that is itself a power of a shorter word (`w^k`, `k ≥ 2`) does not
/// count, so a short pattern repeated many times is not reported through its
/// multiples.
pub fn detect_repetition(tokens: &[u32]) -> bool {
    for p in REPETITION_UNIT {
        let need = REPETITION_LIMIT * p; // positions with s[i] == s[i + p]
        if tokens.len() < need + p {
            break;
        }
        let mut run = 0usize;
        for i in 0..tokens.len() - p {
            if tokens[i] == tokens[i + p] {
                run += 1;
                if run >= need {
                    let start = i + 1 - run;
                    if is_primitive(&tokens[start..start + p]) {
                        return true;
                    }
                }
            } else {
                run = 0;
            }
        }
    }
    false
}

fn is_primitive(unit: &[u32]) -> bool {
    let p = unit.len();
    !(1..p).any(|d| p.is_multiple_of(d) && (d..p).all(|i| unit[i] == unit[i - d]))
}

pub fn detect_excessive_tool_calls(tool_calls: usize) -> bool {
    tool_calls > MAX_TOOL_CALLS_PER_TURN
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeoutAction {
    Continue,
    AbortNextStep,
}

pub fn compile_timeout_guard(consecutive_timeouts: u32, threshold: u32) -> TimeoutAction {
    if consecutive_timeouts >= threshold {
        TimeoutAction::AbortNextStep
    } else {
        TimeoutAction::Continue
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitLimits {
    pub max_steps: usize,
    pub max_context_tokens: usize,
    pub max_step_tokens: usize,
    pub compile_timeout_threshold: u32,
}

impl Default for ExitLimits {
    fn default() -> Self {
        Self {
            max_steps: 50,
            max_context_tokens: 40_000,
            max_step_tokens: 8_000,
            compile_timeout_threshold: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrajectoryEvent {
    SetupFailed,
    /// Inference interrupted.
    Abort,
    /// One assistant generation.
    Turn {
        tokens: Vec<u32>,
        tool_calls: usize,
        finish: bool,
    },
    /// Environment echo for the preceding turn.
    Observation {
        tokens: usize,
        /// `Some(timed_out)` for compile calls.
        compile: Option<bool>,
    },
}

/// Incremental exit classifier. The first rule to fire wins.
#[derive(Debug, Clone)]
pub struct ExitMonitor {
    limits: ExitLimits,
    context: usize,
    steps: usize,
    consecutive_timeouts: u32,
    stream: Vec<u32>,
    fired: Option<ExitReason>,
}

impl ExitMonitor {
    pub fn new(limits: ExitLimits, prompt_tokens: usize) -> Self {
        Self {
            limits,
            context: prompt_tokens,
            steps: 0,
            consecutive_timeouts: 0,
            stream: Vec::new(),
            fired: None,
        }
    }

    pub fn fired(&self) -> Option<ExitReason> {
        self.fired
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn observe(&mut self, event: &TrajectoryEvent) -> Option<ExitReason> {
        if self.fired.is_some() {
            return self.fired;
        }
        let l = &self.limits;
        let reason = match event {
            TrajectoryEvent::SetupFailed => Some(ExitReason::EnvironmentSetupFailed),
            TrajectoryEvent::Abort => Some(ExitReason::Abort),
            TrajectoryEvent::Turn {
                tokens,
                tool_calls,
                finish,
            } => {
                self.steps += 1;
                self.context += tokens.len();
                self.stream.extend_from_slice(tokens);
                if tokens.len() >= l.max_step_tokens {
                    Some(ExitReason::MaxTokens)
                } else if self.context >= l.max_context_tokens {
                    Some(ExitReason::ContextLimit)
                } else if detect_excessive_tool_calls(*tool_calls) {
                    Some(ExitReason::ExcessiveToolCalls)
                } else if detect_repetition(&self.stream) {
                    Some(ExitReason::CatastrophicRepetition)
                } else if *finish {
                    Some(ExitReason::FinishCalled)
                } else if *tool_calls == 0 {
                    Some(ExitReason::NoToolCallStop)
                } else {
                    None
                }
            }
            TrajectoryEvent::Observation { tokens, compile } => {
                self.context += tokens;
                match compile {
                    Some(true) => self.consecutive_timeouts += 1,
                    Some(false) => self.consecutive_timeouts = 0,
                    None => {}
                }
                if compile_timeout_guard(self.consecutive_timeouts, l.compile_timeout_threshold)
                    == TimeoutAction::AbortNextStep
                {
                    Some(ExitReason::ConsecutiveCompileTimeouts)
                } else if self.context >= l.max_context_tokens {
                    Some(ExitReason::ContextLimit)
                } else if self.steps >= l.max_steps {
                    Some(ExitReason::MaxSteps)
                } else {
                    None
                }
            }
        };
        self.fired = reason;
        reason
    }
}

/// Classifies a complete event log. A log that ends without any trigger is
/// an assistant stop without a tool call.
pub fn classify_exit(events: &[TrajectoryEvent], limits: &ExitLimits) -> ExitReason {
    let mut monitor = ExitMonitor::new(*limits, 0);
    events
        .iter()
        .find_map(|e| monitor.observe(e))
        .unwrap_or(ExitReason::NoToolCallStop)
}

//! Tabular policy interface to the environment: context keys, action
//! tokens, and trajectory sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::env::{echo, Action, CompileOutcome, StepResult, ToyEnv};
use super::scorer::{score_step, ScorerConfig};
use super::task::{close_of, kind, open_of, Seq, Side, ToyTask, ALPHABET};
use crate::governance::{ExitLimits, ExitMonitor, ExitReason, TrajectoryEvent};
use crate::policy::{PolicyParams, RowId};
use crate::trajectory::{ActionKind, Role, TokenRecord, Trajectory, TrajectoryBuilder};

/// Policy-side action tokens, one vocabulary per slot.
pub mod tok {
    pub const VIEW: u32 = 0;
    pub const EDIT: u32 = 1;
    pub const COMPILE: u32 = 2;
    pub const FINISH: u32 = 3;
    /// Plain reply, no tool call.
    pub const REPLY: u32 = 4;

    pub const AT_ERROR: u32 = 0;
    pub const AT_PARTNER: u32 = 1;

    pub const FIX_ERROR: u32 = 0;
    pub const FIX_PARTNER: u32 = 1;
    pub const SCRAMBLE: u32 = 2;
    pub const STUB: u32 = 3;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Kind = 0,
    Loc = 1,
    Patch = 2,
}

pub const SLOT_WIDTHS: [usize; 3] = [5, 2, 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LastKind {
    Start = 0,
    View = 1,
    Edit = 2,
    Compile = 3,
    Other = 4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Unknown = 0,
    Ok = 1,
    Fail = 2,
    Timeout = 3,
}

/// What a view revealed about which side was corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Clue {
    Unknown = 0,
    ErrorSide = 1,
    PartnerSide = 2,
}

/// Privileged hint: the side the target says to repair. Teacher branch only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Hint {
    None = 0,
    ErrorSide = 1,
    PartnerSide = 2,
}

impl From<Side> for Hint {
    fn from(side: Side) -> Self {
        match side {
            Side::Error => Hint::ErrorSide,
            Side::Partner => Hint::PartnerSide,
        }
    }
}

/// Context key: last action kind, last compile verdict, distance bucket
/// (0, 1, 2+) to the target class, view clue, hint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Context {
    pub last: LastKind,
    pub verdict: Verdict,
    pub dist: u8,
    pub clue: Clue,
    pub hint: Hint,
}

pub const NUM_CONTEXTS: usize = 5 * 4 * 3 * 3 * 3;

impl Context {
    pub fn start(dist: usize, hint: Hint) -> Self {
        Self {
            last: LastKind::Start,
            verdict: Verdict::Unknown,
            dist: dist.min(2) as u8,
            clue: Clue::Unknown,
            hint,
        }
    }

    pub fn index(&self) -> usize {
        let i = self.last as usize;
        let i = i * 4 + self.verdict as usize;
        let i = i * 3 + self.dist as usize;
        let i = i * 3 + self.clue as usize;
        i * 3 + self.hint as usize
    }

    pub fn row(&self, slot: Slot) -> RowId {
        (self.index() * 3 + slot as usize) as RowId
    }

    pub fn with_hint(self, hint: Hint) -> Self {
        Self { hint, ..self }
    }
}

/// Zero-initialized table covering every context and slot.
pub fn new_policy() -> PolicyParams {
    PolicyParams::zeros((0..NUM_CONTEXTS).flat_map(|_| SLOT_WIDTHS))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub limits: ExitLimits,
    pub temperature: f64,
    pub compile_timeout: f64,
    pub setup_failure: f64,
    pub hint_visible: bool,
    pub scorer: ScorerConfig,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            limits: ExitLimits {
                max_steps: 12,
                ..ExitLimits::default()
            },
            temperature: 1.0,
            compile_timeout: 0.0,
            setup_failure: 0.0,
            hint_visible: false,
            scorer: ScorerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub final_sequence: Seq,
    pub compiled_before_finish: bool,
}

/// Maps a policy action to an environment action. Locations refer to the
/// first reported violation; before any failing compile they are invalid.
fn resolve(
    env: &ToyEnv,
    kind_tok: u32,
    arg: Option<u32>,
    scramble: &mut dyn FnMut() -> u8,
) -> Option<Action> {
    let site = env.error_site();
    let seq = env.sequence();
    let at = |loc: u32| -> usize {
        match (site, loc) {
            (Some(v), tok::AT_ERROR) => v.pos,
            (Some(v), _) => v.partner.unwrap_or(usize::MAX),
            (None, _) => usize::MAX,
        }
    };
    Some(match kind_tok {
        tok::VIEW => Action::View(at(arg?)),
        tok::EDIT => match arg? {
            tok::STUB => Action::Stub,
            tok::SCRAMBLE => Action::Edit(at(tok::AT_ERROR), scramble()),
            patch => {
                let (p, q) = (at(tok::AT_ERROR), at(tok::AT_PARTNER));
                if p >= seq.len() || q >= seq.len() {
                    Action::Edit(usize::MAX, 0)
                } else if patch == tok::FIX_ERROR {
                    Action::Edit(p, close_of(kind(seq[q])))
                } else {
                    Action::Edit(q, open_of(kind(seq[p])))
                }
            }
        },
        tok::COMPILE => Action::Compile,
        tok::FINISH => Action::Finish,
        _ => return None,
    })
}

fn action_kind(kind_tok: u32) -> ActionKind {
    match kind_tok {
        tok::VIEW => ActionKind::View,
        tok::EDIT => ActionKind::Edit,
        tok::COMPILE => ActionKind::Compile,
        tok::FINISH => ActionKind::Finish,
        _ => ActionKind::Other,
    }
}

fn next_context(
    ctx: Context,
    task: &ToyTask,
    env: &ToyEnv,
    kind_tok: u32,
    arg: Option<u32>,
    result: &StepResult,
) -> Context {
    let mut next = ctx;
    next.last = if !result.valid {
        LastKind::Other
    } else {
        match kind_tok {
            tok::VIEW => LastKind::View,
            tok::EDIT => LastKind::Edit,
            tok::COMPILE => LastKind::Compile,
            _ => LastKind::Other,
        }
    };
    if let Some(c) = result.compile {
        next.verdict = match c {
            CompileOutcome::Ok => Verdict::Ok,
            CompileOutcome::Fail(_) => Verdict::Fail,
            CompileOutcome::Timeout => Verdict::Timeout,
        };
    }
    if result.valid && kind_tok == tok::VIEW {
        let marked = result.echo.get(1) == Some(&echo::MARK);
        next.clue = match (arg == Some(tok::AT_ERROR), marked) {
            (true, true) | (false, false) => Clue::ErrorSide,
            _ => Clue::PartnerSide,
        };
    }
    next.dist = task.distance(env.sequence()).min(2) as u8;
    next
}

/// Samples one trajectory. Assistant tokens record their sampling row, the
/// matching row across the hint boundary, and log-probabilities under the
/// sampling parameters (`logp_current == logp_old`) and `reference`.
pub fn sample_trajectory<R: Rng + ?Sized>(
    params: &PolicyParams,
    reference: &PolicyParams,
    task: &ToyTask,
    cfg: &RolloutConfig,
    rng: &mut R,
) -> Rollout {
    let task_hint = Hint::from(task.corrupted_side());
    let hint = if cfg.hint_visible {
        task_hint
    } else {
        Hint::None
    };
    let counter_hint = if cfg.hint_visible {
        Hint::None
    } else {
        task_hint
    };
    let prompt_tokens = task.len() + usize::from(cfg.hint_visible);
    let mut monitor = ExitMonitor::new(cfg.limits, prompt_tokens);
    let mut env = ToyEnv::new(task);
    let mut b = TrajectoryBuilder::new(task.id.clone());
    let mut ctx = Context::start(task.distance(&task.initial_sequence), hint);

    let setup_failed = cfg.setup_failure > 0.0 && rng.random_bool(cfg.setup_failure);
    if setup_failed {
        monitor.observe(&TrajectoryEvent::SetupFailed);
    }
    while monitor.fired().is_none() {
        let draw = |slot: Slot, b: &mut TrajectoryBuilder, rng: &mut R| -> u32 {
            let row = ctx.row(slot);
            let counter = ctx.with_hint(counter_hint).row(slot);
            let (token, lp) = params.sample(row, cfg.temperature, rng);
            let teacher_row = if cfg.hint_visible { row } else { counter };
            b.push_assistant(TokenRecord {
                token_id: token,
                role: Role::Assistant,
                step_index: 0,
                row: Some(row),
                counterpart_row: Some(counter),
                logp_current: lp,
                logp_old: lp,
                logp_ref: reference.logp(row, token),
                logp_teacher: Some(params.logp(teacher_row, token)),
            });
            token
        };
        b.begin_step(ActionKind::Other);
        let kind_tok = draw(Slot::Kind, &mut b, rng);
        b.set_action(action_kind(kind_tok));
        let arg = match kind_tok {
            tok::VIEW => Some(draw(Slot::Loc, &mut b, rng)),
            tok::EDIT => Some(draw(Slot::Patch, &mut b, rng)),
            _ => None,
        };
        let turn: Vec<u32> = b.tokens()[b.tokens().len() - 1 - usize::from(arg.is_some())..]
            .iter()
            .map(|t| t.token_id)
            .collect();
        let fired = monitor.observe(&TrajectoryEvent::Turn {
            tokens: turn,
            tool_calls: usize::from(kind_tok != tok::REPLY),
            finish: kind_tok == tok::FINISH,
        });
        if fired.is_some_and(|r| r != ExitReason::FinishCalled) {
            break;
        }
        let Some(action) = resolve(&env, kind_tok, arg, &mut || {
            rng.random_range(0..ALPHABET.len() as u8)
        }) else {
            break;
        };
        let timed_out = action == Action::Compile
            && cfg.compile_timeout > 0.0
            && rng.random_bool(cfg.compile_timeout);
        let result = env.step(action, timed_out).expect("loop stops at finish");
        for &e in &result.echo {
            b.push_echo(e);
        }
        if result.terminal {
            break;
        }
        monitor.observe(&TrajectoryEvent::Observation {
            tokens: result.echo.len(),
            compile: result.compile.map(|c| c == CompileOutcome::Timeout),
        });
        ctx = next_context(ctx, task, &env, kind_tok, arg, &result);
    }

    let mut trajectory = b.finish();
    trajectory.exit_reason = monitor.fired().unwrap_or(ExitReason::NoToolCallStop);
    trajectory.surface_ok = env.surface_ok();
    trajectory.semantic_ok = env.semantic_ok();
    let scores = synthetic_step_scorer(&trajectory, task, &cfg.scorer);
    for (step, s) in trajectory.steps.iter_mut().zip(scores) {
        step.score = Some(s);
    }
    Rollout {
        final_sequence: env.sequence().to_vec(),
        compiled_before_finish: env.compiled_before_finish(),
        trajectory,
    }
}

/// Re-executes the recorded actions against a fresh environment and scores
/// every step. Steps whose turn never reached the environment score 0.
pub fn synthetic_step_scorer(
    trajectory: &Trajectory,
    task: &ToyTask,
    cfg: &ScorerConfig,
) -> Vec<f64> {
    let mut env = ToyEnv::new(task);
    let mut scores = Vec::with_capacity(trajectory.steps.len());
    for step in &trajectory.steps {
        let toks = &trajectory.tokens;
        let assistant: Vec<u32> = step
            .assistant_span
            .clone()
            .map(|t| toks[t].token_id)
            .collect();
        let echoes: Vec<u32> = step.echo_span.clone().map(|t| toks[t].token_id).collect();
        if echoes.is_empty() || assistant.is_empty() {
            scores.push(score_step(task, None, cfg));
            continue;
        }
        let kind_tok = assistant[0];
        let arg = assistant.get(1).copied();
        // a scrambled symbol is recovered from the edit echo
        let echoed = echoes.get(1).map_or(0, |&s| s as u8);
        let Some(action) = resolve(&env, kind_tok, arg, &mut || echoed) else {
            scores.push(score_step(task, None, cfg));
            continue;
        };
        let timed_out = echoes[0] == echo::TIMEOUT;
        match env.step(action, timed_out) {
            Ok(_) => scores.push(score_step(task, env.log().last(), cfg)),
            Err(_) => scores.push(score_step(task, None, cfg)),
        }
    }
    scores
}

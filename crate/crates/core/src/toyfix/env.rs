//! Working-copy environment: view, edit, compile, finish over one task.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::task::{first_violation, stub, surface_check, Seq, ToyTask, Violation, ALPHABET};
use super::ToyError;

/// Echo vocabulary. Symbols occupy `0..6`, positions start at [`echo::POS0`].
pub mod echo {
    pub const OK: u32 = 6;
    pub const FAIL: u32 = 7;
    pub const TIMEOUT: u32 = 8;
    pub const ACK: u32 = 9;
    pub const ERR: u32 = 10;
    pub const DONE: u32 = 11;
    pub const MARK: u32 = 12;
    pub const NOMARK: u32 = 13;
    pub const NONE: u32 = 14;
    pub const POS0: u32 = 15;

    pub fn sym(s: u8) -> u32 {
        s as u32
    }

    pub fn pos(p: usize) -> u32 {
        POS0 + p as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    View(usize),
    Edit(usize, u8),
    /// Replace the whole working copy with the compile-passing placeholder.
    Stub,
    Compile,
    Finish,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompileOutcome {
    Ok,
    Fail(Violation),
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepResult {
    pub echo: Vec<u32>,
    pub terminal: bool,
    pub compile: Option<CompileOutcome>,
    /// False when the action was rejected with an error echo.
    pub valid: bool,
}

/// What one step did to the working copy; consumed by the step scorer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepLog {
    pub action: Action,
    pub before: Seq,
    pub after: Seq,
    pub result: StepResult,
    pub repeat_view: bool,
}

#[derive(Debug, Clone)]
pub struct ToyEnv<'a> {
    task: &'a ToyTask,
    seq: Seq,
    error_site: Option<Violation>,
    viewed: BTreeSet<usize>,
    compiled: bool,
    finished: bool,
    log: Vec<StepLog>,
}

impl<'a> ToyEnv<'a> {
    pub fn new(task: &'a ToyTask) -> Self {
        Self {
            task,
            seq: task.initial_sequence.clone(),
            error_site: None,
            viewed: BTreeSet::new(),
            compiled: false,
            finished: false,
            log: Vec::new(),
        }
    }

    pub fn sequence(&self) -> &[u8] {
        &self.seq
    }

    /// The first failing compile's violation. Fixed once reported.
    pub fn error_site(&self) -> Option<Violation> {
        self.error_site
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Whether a compile ran before finish (logged, never enforced).
    pub fn compiled_before_finish(&self) -> bool {
        self.compiled
    }

    pub fn log(&self) -> &[StepLog] {
        &self.log
    }

    pub fn surface_ok(&self) -> bool {
        surface_check(&self.seq)
    }

    pub fn semantic_ok(&self) -> bool {
        self.task.semantic_check(&self.seq)
    }

    /// Applies an action. `timed_out` decides a compile's fault injection so
    /// the step itself stays deterministic.
    pub fn step(&mut self, action: Action, timed_out: bool) -> Result<StepResult, ToyError> {
        if self.finished {
            return Err(ToyError::AfterFinish);
        }
        let before = self.seq.clone();
        let mut repeat_view = false;
        let n = self.seq.len();
        let invalid = StepResult {
            echo: vec![echo::ERR],
            terminal: false,
            compile: None,
            valid: false,
        };
        let result = match action {
            Action::View(i) if i < n => {
                repeat_view = !self.viewed.insert(i);
                let mark = if self.task.corrupted_position() == Some(i) {
                    echo::MARK
                } else {
                    echo::NOMARK
                };
                StepResult {
                    echo: vec![echo::sym(self.seq[i]), mark],
                    terminal: false,
                    compile: None,
                    valid: true,
                }
            }
            Action::Edit(i, s) if i < n && (s as usize) < ALPHABET.len() => {
                self.seq[i] = s;
                StepResult {
                    echo: vec![echo::ACK, echo::sym(s)],
                    terminal: false,
                    compile: None,
                    valid: true,
                }
            }
            Action::View(_) | Action::Edit(..) => invalid,
            Action::Stub => {
                self.seq = stub(n);
                StepResult {
                    echo: vec![echo::ACK],
                    terminal: false,
                    compile: None,
                    valid: true,
                }
            }
            Action::Compile => {
                self.compiled = true;
                let (outcome, echo) = if timed_out {
                    (CompileOutcome::Timeout, vec![echo::TIMEOUT])
                } else {
                    match first_violation(&self.seq) {
                        None => (CompileOutcome::Ok, vec![echo::OK]),
                        Some(v) => {
                            self.error_site.get_or_insert(v);
                            let partner = v.partner.map_or(echo::NONE, echo::pos);
                            (
                                CompileOutcome::Fail(v),
                                vec![echo::FAIL, echo::pos(v.pos), partner],
                            )
                        }
                    }
                };
                StepResult {
                    echo,
                    terminal: false,
                    compile: Some(outcome),
                    valid: true,
                }
            }
            Action::Finish => {
                self.finished = true;
                StepResult {
                    echo: vec![echo::DONE],
                    terminal: true,
                    compile: None,
                    valid: true,
                }
            }
        };
        self.log.push(StepLog {
            action,
            before,
            after: self.seq.clone(),
            result: result.clone(),
            repeat_view,
        });
        Ok(result)
    }
}

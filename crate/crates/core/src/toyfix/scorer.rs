//! Deterministic step rubric rewarding information gain and progress toward
//! the semantic class.

use serde::{Deserialize, Serialize};

use super::env::{Action, CompileOutcome, StepLog};
use super::task::ToyTask;

pub const COMPILE_OK_BONUS: f64 = 0.15;
pub const FIRST_VIEW: f64 = 0.6;
/// Cap for re-viewing an inspected location.
pub const REPEAT_VIEW: f64 = 0.1;
pub const EDIT_SOLVES: f64 = 1.0;
pub const EDIT_CLOSER: f64 = 0.8;
pub const EDIT_NEUTRAL: f64 = 0.3;
pub const EDIT_WORSE: f64 = 0.0;
pub const FINISH_SOLVED: f64 = 0.9;
pub const FINISH_SHORTCUT: f64 = 0.2;
pub const FINISH_BROKEN: f64 = 0.1;
pub const INVALID: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub compile_base: f64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self { compile_base: 0.7 }
    }
}

/// Score of one step; `None` is a turn with no environment action.
pub fn score_step(task: &ToyTask, log: Option<&StepLog>, cfg: &ScorerConfig) -> f64 {
    let Some(log) = log else {
        return 0.0;
    };
    if !log.result.valid {
        return INVALID;
    }
    let s = match log.action {
        Action::Compile => match log.result.compile {
            Some(CompileOutcome::Ok) => cfg.compile_base + COMPILE_OK_BONUS,
            _ => cfg.compile_base,
        },
        Action::View(_) => {
            if log.repeat_view {
                REPEAT_VIEW
            } else {
                FIRST_VIEW
            }
        }
        Action::Edit(..) | Action::Stub => {
            let before = task.distance(&log.before);
            let after = task.distance(&log.after);
            if after == 0 && before > 0 {
                EDIT_SOLVES
            } else if after < before {
                EDIT_CLOSER
            } else if after == before {
                EDIT_NEUTRAL
            } else {
                EDIT_WORSE
            }
        }
        Action::Finish => {
            if task.semantic_check(&log.after) {
                FINISH_SOLVED
            } else if task.surface_check(&log.after) {
                FINISH_SHORTCUT
            } else {
                FINISH_BROKEN
            }
        }
    };
    s.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyfix::env::ToyEnv;
    use crate::toyfix::task::tests::fixed_task;

    fn run(actions: &[Action]) -> Vec<f64> {
        let task = fixed_task();
        let mut env = ToyEnv::new(&task);
        for &a in actions {
            env.step(a, false).unwrap();
        }
        env.log()
            .iter()
            .map(|l| score_step(&task, Some(l), &ScorerConfig::default()))
            .collect()
    }

    #[test]
    fn rubric_examples() {
        let s = run(&[
            Action::Compile,
            Action::View(4),
            Action::View(4),
            Action::Edit(4, 3),
            Action::Compile,
            Action::Finish,
        ]);
        assert_eq!(s[0], 0.7);
        assert_eq!(s[1], FIRST_VIEW);
        assert!(s[2] <= 0.2);
        assert_eq!(s[3], 1.0);
        assert!(s[4] >= 0.7);
        assert_eq!(s[5], FINISH_SOLVED);
    }

    #[test]
    fn shortcut_and_stub_score_low() {
        let s = run(&[Action::Edit(3, 4), Action::Stub, Action::Finish]);
        assert_eq!(s[0], EDIT_WORSE);
        assert_eq!(s[2], FINISH_SHORTCUT);
        assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(
            score_step(&fixed_task(), None, &ScorerConfig::default()),
            0.0
        );
    }
}

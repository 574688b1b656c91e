//! Token-level KL over assistant tokens, KL reward shaping, and the
//! student/teacher batch expansion used by privileged-hint distillation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::PolicyParams;
use crate::trajectory::{effective_mask, Role, Trajectory};

const NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistillError {
    #[error("{which} distribution sums to {sum}, not 1")]
    NotNormalized { which: &'static str, sum: f64 },
    #[error("distributions have different sizes ({0} vs {1})")]
    VocabMismatch(usize, usize),
    #[error("topk {k} outside 1..={vocab}")]
    TopK { k: usize, vocab: usize },
    #[error("beta must be nonnegative, got {0}")]
    NegativeBeta(f64),
    #[error("alpha must lie in [0, 1], got {0}")]
    Alpha(f64),
    #[error("per-token KL has {kl} entries but mask has {mask}")]
    LengthMismatch { kl: usize, mask: usize },
    #[error("assistant token {0} has no counterpart row")]
    MissingCounterpart(usize),
    #[error("unknown {what} `{value}`")]
    Unknown { what: &'static str, value: String },
}

/// `TeacherToStudent` is KL(teacher ‖ student); `StudentToTeacher` is
/// KL(student ‖ teacher).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    TeacherToStudent,
    StudentToTeacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    MaskedSum,
    MaskedMean,
    /// Experimental: the per-token vector is folded into token advantages.
    PerTokenInAdvantage,
}

impl FromStr for Aggregation {
    type Err = DistillError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "masked_sum" => Ok(Self::MaskedSum),
            "masked_mean" => Ok(Self::MaskedMean),
            "per_token_in_advantage" => Ok(Self::PerTokenInAdvantage),
            _ => Err(DistillError::Unknown {
                what: "aggregation",
                value: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MaskedSum => "masked_sum",
            Self::MaskedMean => "masked_mean",
            Self::PerTokenInAdvantage => "per_token_in_advantage",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlConfig {
    pub direction: KlDirection,
    pub aggregation: Aggregation,
    pub beta: f64,
    pub topk: Option<usize>,
}

impl KlConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if self.beta.is_nan() || self.beta < 0.0 {
            return Err(DistillError::NegativeBeta(self.beta));
        }
        if self.topk == Some(0) {
            return Err(DistillError::TopK { k: 0, vocab: 0 });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    PiDistill,
    Opsd,
}

impl FromStr for Mode {
    type Err = DistillError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pi_distill" => Ok(Self::PiDistill),
            "opsd" => Ok(Self::Opsd),
            _ => Err(DistillError::Unknown {
                what: "distill mode",
                value: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PiDistill => "pi_distill",
            Self::Opsd => "opsd",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillMode {
    pub mode: Mode,
    pub alpha: f64,
}

impl DistillMode {
    pub fn new(mode: Mode, alpha: f64) -> Result<Self, DistillError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(DistillError::Alpha(alpha));
        }
        Ok(Self { mode, alpha })
    }

    /// The sampling policy and KL direction each mode uses.
    pub fn direction(&self) -> KlDirection {
        match self.mode {
            Mode::PiDistill => KlDirection::TeacherToStudent,
            Mode::Opsd => KlDirection::StudentToTeacher,
        }
    }

    /// (student copy, teacher copy) loss weights.
    pub fn copy_weights(&self) -> (f64, f64) {
        (2.0 * (1.0 - self.alpha), 2.0 * self.alpha)
    }
}

fn check_normalized(p: &[f64], which: &'static str) -> Result<(), DistillError> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > NORM_TOL || p.iter().any(|v| v.is_nan() || *v < 0.0) {
        return Err(DistillError::NotNormalized { which, sum });
    }
    Ok(())
}

fn kl_term(p: f64, q: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * (p / q).ln()
    }
}

/// KL divergence in the given direction. With `topk`, only the `k` most
/// likely tokens of the first argument are kept and the rest of both
/// distributions is lumped into a single tail bucket.
pub fn token_kl(
    p_teacher: &[f64],
    p_student: &[f64],
    direction: KlDirection,
    topk: Option<usize>,
) -> Result<f64, DistillError> {
    if p_teacher.len() != p_student.len() {
        return Err(DistillError::VocabMismatch(
            p_teacher.len(),
            p_student.len(),
        ));
    }
    check_normalized(p_teacher, "teacher")?;
    check_normalized(p_student, "student")?;
    let (p, q) = match direction {
        KlDirection::TeacherToStudent => (p_teacher, p_student),
        KlDirection::StudentToTeacher => (p_student, p_teacher),
    };
    let vocab = p.len();
    let kl = match topk {
        None => p.iter().zip(q).map(|(&a, &b)| kl_term(a, b)).sum(),
        Some(k) => {
            if k == 0 || k > vocab {
                return Err(DistillError::TopK { k, vocab });
            }
            let mut order: Vec<usize> = (0..vocab).collect();
            order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
            let head: f64 = order[..k].iter().map(|&i| kl_term(p[i], q[i])).sum();
            let p_tail: f64 = order[k..].iter().map(|&i| p[i]).sum();
            let q_tail: f64 = order[k..].iter().map(|&i| q[i]).sum();
            head + kl_term(p_tail, q_tail)
        }
    };
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum KlValue {
    Scalar(f64),
    PerToken(Vec<f64>),
}

impl KlValue {
    /// Scalar view; a per-token vector is summed.
    pub fn total(&self) -> f64 {
        match self {
            KlValue::Scalar(v) => *v,
            KlValue::PerToken(v) => v.iter().sum(),
        }
    }
}

/// Aggregates per-token KL over active tokens.
pub fn masked_kl(
    per_token: &[f64],
    mask: &[u8],
    aggregation: Aggregation,
) -> Result<KlValue, DistillError> {
    if per_token.len() != mask.len() {
        return Err(DistillError::LengthMismatch {
            kl: per_token.len(),
            mask: mask.len(),
        });
    }
    let masked: Vec<f64> = per_token
        .iter()
        .zip(mask)
        .map(|(&k, &m)| if m == 0 { 0.0 } else { k })
        .collect();
    let sum: f64 = masked.iter().sum();
    Ok(match aggregation {
        Aggregation::MaskedSum => KlValue::Scalar(sum),
        Aggregation::MaskedMean => {
            let active = mask.iter().filter(|&&m| m != 0).count();
            KlValue::Scalar(sum / active.max(1) as f64)
        }
        Aggregation::PerTokenInAdvantage => KlValue::PerToken(masked),
    })
}

/// Per-token KL between the hinted (teacher) and hint-free (student) rows of
/// every assistant token, evaluated at a parameter snapshot. `hinted_sampler`
/// says whether `row` is the hinted row (teacher-sampled trajectories).
/// Echo tokens get 0.
pub fn trajectory_token_kls(
    trajectory: &Trajectory,
    params: &PolicyParams,
    cfg: &KlConfig,
    hinted_sampler: bool,
) -> Result<Vec<f64>, DistillError> {
    trajectory
        .tokens
        .iter()
        .enumerate()
        .map(|(t, tok)| {
            if tok.role == Role::Echo {
                return Ok(0.0);
            }
            let (Some(row), Some(other)) = (tok.row, tok.counterpart_row) else {
                return Err(DistillError::MissingCounterpart(t));
            };
            let (teacher, student) = if hinted_sampler {
                (row, other)
            } else {
                (other, row)
            };
            let (pt, ps) = (params.probs(teacher), params.probs(student));
            // rows narrower than k keep their full vocabulary
            let topk = cfg.topk.map(|k| k.min(pt.len()));
            token_kl(&pt, &ps, cfg.direction, topk)
        })
        .collect()
}

/// Convenience: masked KL of a trajectory under `cfg`.
pub fn trajectory_kl(
    trajectory: &Trajectory,
    params: &PolicyParams,
    cfg: &KlConfig,
    hinted_sampler: bool,
) -> Result<KlValue, DistillError> {
    let per_token = trajectory_token_kls(trajectory, params, cfg, hinted_sampler)?;
    masked_kl(&per_token, &effective_mask(trajectory), cfg.aggregation)
}

/// `R̃ = R − β·KL(student ‖ teacher)`.
pub fn shape_reward_opsd(r_env: f64, kl: f64, beta: f64) -> f64 {
    r_env - beta * kl
}

/// `R̃ = R − β·KL(teacher ‖ sg(student))`, shared by both expansion copies.
pub fn shape_reward_pidistill(r_env: f64, kl_teacher_to_student: f64, beta: f64) -> f64 {
    r_env - beta * kl_teacher_to_student
}

/// Two loss copies of one teacher-sampled trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Expansion {
    /// Hint-free rows; ratio is hint-free current over hinted old.
    pub student: Trajectory,
    pub student_weight: f64,
    /// Hinted rows; ratio is hinted current over hinted old.
    pub teacher: Trajectory,
    pub teacher_weight: f64,
}

/// Splits a teacher trajectory into student and teacher copies. Both keep the
/// teacher's reward and old log-probabilities; the student copy's reference
/// log-probabilities are re-read from `reference` at its own rows.
pub fn expand_batch(
    teacher_trajectory: &Trajectory,
    mode: &DistillMode,
    current: &PolicyParams,
    reference: &PolicyParams,
) -> Result<Expansion, DistillError> {
    let (student_weight, teacher_weight) = mode.copy_weights();
    let mut student = teacher_trajectory.clone();
    for (t, tok) in student.tokens.iter_mut().enumerate() {
        if tok.role == Role::Echo {
            continue;
        }
        let (Some(hinted), Some(free)) = (tok.row, tok.counterpart_row) else {
            return Err(DistillError::MissingCounterpart(t));
        };
        tok.row = Some(free);
        tok.counterpart_row = Some(hinted);
        tok.logp_current = current.logp(free, tok.token_id);
        tok.logp_ref = reference.logp(free, tok.token_id);
    }
    Ok(Expansion {
        student,
        student_weight,
        teacher: teacher_trajectory.clone(),
        teacher_weight,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grpo::{group_advantages, DEGENERACY_EPS};
    use crate::trajectory::ActionKind;
    use crate::trajectory::{TokenRecord, TrajectoryBuilder};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn kl_examples() {
        let t = [0.75, 0.25];
        let s = [0.5, 0.5];
        assert_eq!(
            token_kl(&t, &t, KlDirection::TeacherToStudent, None).unwrap(),
            0.0
        );
        let kl = token_kl(&t, &s, KlDirection::TeacherToStudent, None).unwrap();
        assert_abs_diff_eq!(kl, 0.130812, epsilon = 1e-6);
        assert_abs_diff_eq!(kl, 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln(), epsilon = 1e-15);
        let rev = token_kl(&t, &s, KlDirection::StudentToTeacher, None).unwrap();
        assert_abs_diff_eq!(
            rev,
            0.5 * (0.5f64 / 0.75).ln() + 0.5 * 2f64.ln(),
            epsilon = 1e-15
        );
        assert_eq!(
            token_kl(&t, &s, KlDirection::TeacherToStudent, Some(2)).unwrap(),
            kl
        );
    }

    #[test]
    fn topk_lumps_tail() {
        let p = [0.5, 0.3, 0.15, 0.05];
        let q = [0.25, 0.25, 0.25, 0.25];
        let k1 = token_kl(&p, &q, KlDirection::TeacherToStudent, Some(1)).unwrap();
        assert_abs_diff_eq!(
            k1,
            0.5 * 2f64.ln() + 0.5 * (0.5f64 / 0.75).ln(),
            epsilon = 1e-15
        );
        assert!(matches!(
            token_kl(&p, &q, KlDirection::TeacherToStudent, Some(5)),
            Err(DistillError::TopK { k: 5, vocab: 4 })
        ));
    }

    #[test]
    fn unnormalized_inputs_rejected() {
        assert!(matches!(
            token_kl(
                &[0.6, 0.6],
                &[0.5, 0.5],
                KlDirection::TeacherToStudent,
                None
            ),
            Err(DistillError::NotNormalized {
                which: "teacher",
                ..
            })
        ));
        assert!(token_kl(
            &[0.5, 0.5],
            &[0.5, 0.5 + 5e-7],
            KlDirection::TeacherToStudent,
            None
        )
        .is_ok());
    }

    #[test]
    fn masked_aggregations() {
        let kl = [0.130812, 0.130812, 9.0];
        let mask = [1, 1, 0];
        assert_abs_diff_eq!(
            masked_kl(&kl, &mask, Aggregation::MaskedSum)
                .unwrap()
                .total(),
            0.261624,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            masked_kl(&kl, &mask, Aggregation::MaskedMean)
                .unwrap()
                .total(),
            0.130812,
            epsilon = 1e-12
        );
        assert_eq!(
            masked_kl(&kl, &mask, Aggregation::PerTokenInAdvantage).unwrap(),
            KlValue::PerToken(vec![0.130812, 0.130812, 0.0])
        );
        assert_eq!(
            masked_kl(&kl, &[0, 0, 0], Aggregation::MaskedMean).unwrap(),
            KlValue::Scalar(0.0)
        );
        assert!(masked_kl(&kl, &[1], Aggregation::MaskedSum).is_err());
    }

    #[test]
    fn shaping_examples() {
        assert_abs_diff_eq!(shape_reward_opsd(1.0, 10.0, 0.02), 0.8, epsilon = 1e-15);
        assert_eq!(shape_reward_opsd(0.5, 3.0, 0.0), 0.5);
        assert_eq!(shape_reward_opsd(0.5, 0.0, 0.02), 0.5);
        assert_abs_diff_eq!(
            shape_reward_pidistill(0.5, 5.0, 0.01),
            0.45,
            epsilon = 1e-15
        );
        assert!(shape_reward_pidistill(0.0, 1.0, 0.01) < 0.0);
        let a = group_advantages(&[-0.01, 0.99, 0.49], DEGENERACY_EPS).unwrap();
        let b = group_advantages(&[0.0, 1.0, 0.5], DEGENERACY_EPS).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    fn hinted_traj() -> (Trajectory, PolicyParams) {
        // rows 0,1 hint-free; rows 2,3 hinted counterparts
        let mut params = PolicyParams::zeros([3, 3, 3, 3]);
        params.rows[0] = vec![0.0, 0.5, -0.5];
        params.rows[2] = vec![2.0, 0.0, 0.0];
        params.rows[3] = vec![0.0, 0.0, 1.5];
        let mut b = TrajectoryBuilder::new("p");
        for (row, free, tok) in [(2u32, 0u32, 0u32), (3, 1, 2)] {
            b.begin_step(ActionKind::Other);
            let lp = params.logp(row, tok);
            b.push_assistant(TokenRecord {
                row: Some(row),
                counterpart_row: Some(free),
                logp_current: lp,
                logp_old: lp,
                logp_ref: lp,
                ..TokenRecord::echo(tok, 0)
            });
            b.push_echo(7);
        }
        (b.finish(), params)
    }

    #[test]
    fn expansion_weights_and_ratio_sources() {
        let (traj, params) = hinted_traj();
        let half = DistillMode::new(Mode::PiDistill, 0.5).unwrap();
        let e = expand_batch(&traj, &half, &params, &params).unwrap();
        assert_eq!((e.student_weight, e.teacher_weight), (1.0, 1.0));
        assert_eq!(e.teacher, traj);
        let tok = &e.student.tokens[0];
        assert_eq!(tok.row, Some(0));
        assert_eq!(tok.logp_old, traj.tokens[0].logp_old);
        assert_abs_diff_eq!(tok.logp_current, params.logp(0, 0), epsilon = 1e-15);
        let pure = DistillMode::new(Mode::PiDistill, 1.0).unwrap();
        assert_eq!(pure.copy_weights().0, 0.0);
        assert!(DistillMode::new(Mode::PiDistill, 1.5).is_err());
    }

    #[test]
    fn trajectory_kl_reads_counterpart_rows() {
        let (traj, params) = hinted_traj();
        let cfg = KlConfig {
            direction: KlDirection::TeacherToStudent,
            aggregation: Aggregation::MaskedSum,
            beta: 0.01,
            topk: None,
        };
        let per = trajectory_token_kls(&traj, &params, &cfg, true).unwrap();
        let want0 = token_kl(&params.probs(2), &params.probs(0), cfg.direction, None).unwrap();
        assert_abs_diff_eq!(per[0], want0, epsilon = 1e-15);
        assert_eq!(per[1], 0.0);
        let total = trajectory_kl(&traj, &params, &cfg, true).unwrap().total();
        assert_abs_diff_eq!(total, per.iter().sum::<f64>(), epsilon = 1e-15);
    }

    fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn kl_nonnegative_and_zero_on_equal((p, q) in (2usize..6).prop_flat_map(|n| (dist(n), dist(n)))) {
            for d in [KlDirection::TeacherToStudent, KlDirection::StudentToTeacher] {
                prop_assert!(token_kl(&p, &q, d, None).unwrap() >= 0.0);
                prop_assert_eq!(token_kl(&p, &p, d, None).unwrap(), 0.0);
                let k = p.len();
                prop_assert!((token_kl(&p, &q, d, Some(k)).unwrap() - token_kl(&p, &q, d, None).unwrap()).abs() < 1e-12);
                // lumping never increases divergence
                prop_assert!(token_kl(&p, &q, d, Some(1)).unwrap() <= token_kl(&p, &q, d, None).unwrap() + 1e-12);
            }
        }
    }
}

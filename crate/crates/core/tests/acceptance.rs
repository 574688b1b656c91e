//! Acceptance criteria. Each test prints one PASS/FAIL line straight to
//! stderr (bypassing the test harness capture) and then asserts.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weakgrpo_core::credit::{step_weights, AdvantageSign, Branch, NEGATIVE_FLOOR};
use weakgrpo_core::distill::{masked_kl, shape_reward_opsd, token_kl, Aggregation, KlDirection};
use weakgrpo_core::experiment::{load_splits, replay, run_training, RecordKind, RunConfig, Sinks};
use weakgrpo_core::governance::{
    apply_routing, classify_exit, peak_occupancy, random_workload, route, schedule, EventKind,
    ExitLimits, ExitMonitor, ExitReason, Handling, PoolKind, TrajectoryEvent,
};
use weakgrpo_core::grpo::{
    group_advantages, grpo_loss, ClipConfig, PolicyTerm, RolloutGroup, TrajectoryTerms,
    DEGENERACY_EPS,
};
use weakgrpo_core::policy::PolicyParams;
use weakgrpo_core::stats::{
    cohen_kappa, confusion_metrics, mcnemar, rogan_gladen, wilson_ci, AuditTable,
};
use weakgrpo_core::toyfix::{generate_task, new_policy, sample_trajectory, RolloutConfig};

struct Report {
    id: &'static str,
    name: &'static str,
    failures: Vec<String>,
    started: Instant,
}

impl Report {
    fn new(id: &'static str, name: &'static str) -> Self {
        Self {
            id,
            name,
            failures: Vec::new(),
            started: Instant::now(),
        }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if !ok {
            self.failures.push(what());
        }
    }

    fn runtime(&mut self, limit: Duration) {
        let t = self.started.elapsed();
        self.check(t <= limit, || format!("runtime {t:?} exceeds {limit:?}"));
    }

    fn finish(self) {
        let status = if self.failures.is_empty() {
            "PASS"
        } else {
            "FAIL"
        };
        let mut line = format!(
            "{} {status}: {} ({:.2?})",
            self.id,
            self.name,
            self.started.elapsed()
        );
        for f in &self.failures {
            line.push_str(&format!("\n    {f}"));
        }
        line.push('\n');
        let _ = std::io::stderr().write_all(line.as_bytes());
        assert!(
            self.failures.is_empty(),
            "{} failed: {:?}",
            self.id,
            self.failures
        );
    }
}

fn round_to(x: f64, places: i32) -> f64 {
    let f = 10f64.powi(places);
    (x * f).round() / f
}

#[test]
fn ac01_exact_audit_arithmetic() {
    let mut r = Report::new("AC1", "exact audit arithmetic");
    let table = AuditTable::new(176, 24, 16, 184);
    let m = confusion_metrics(&table).unwrap();
    let kappa = cohen_kappa(&table).unwrap();
    for (name, got, want, places) in [
        ("agreement", m.agreement, 0.900, 3),
        ("kappa", kappa, 0.80, 2),
        ("precision", m.precision, 0.880, 3),
        ("recall", m.recall, 0.917, 3),
    ] {
        r.check((round_to(got, places) - want).abs() <= 0.0005, || {
            format!("{name} {got} rounds away from {want}")
        });
    }
    let mc = mcnemar(36, 16).unwrap();
    r.check((mc.chi2 - 7.692).abs() <= 0.001, || {
        format!("McNemar chi2 {}", mc.chi2)
    });
    r.check(mc.p_value <= 0.01, || format!("McNemar p {}", mc.p_value));
    for (p_obs, want) in [(0.53, 0.5175), (0.48, 0.4555)] {
        let got = rogan_gladen(p_obs, 0.917, 0.885).unwrap();
        r.check((got - want).abs() <= 0.001, || {
            format!("Rogan-Gladen({p_obs}) = {got}, want {want}")
        });
    }
    let (lo, hi) = wilson_ci(360, 400, 1.96).unwrap();
    let (lo3, hi3) = (round_to(lo, 3), round_to(hi, 3));
    r.check(lo3 == 0.867 && hi3 == 0.927, || {
        format!(
            "Wilson (360, 400) = [{lo:.5}, {hi:.5}] -> [{lo3:.3}, {hi3:.3}], want [0.867, 0.927]"
        )
    });
    r.runtime(Duration::from_secs(1));
    r.finish();
}

#[test]
fn ac02_mass_preservation() {
    let mut r = Report::new("AC2", "process-credit mass preservation");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for sign in [AdvantageSign::Positive, AdvantageSign::Negative] {
        let mut cases = 0;
        while cases < 10_000 {
            let steps = rng.random_range(1..=12);
            let s: Vec<f64> = (0..steps)
                .map(|_| {
                    if rng.random_bool(0.1) {
                        0.0
                    } else {
                        rng.random::<f64>()
                    }
                })
                .collect();
            let n: Vec<usize> = (0..steps).map(|_| rng.random_range(0..40)).collect();
            let total: usize = n.iter().sum();
            let sbar_num: f64 = s.iter().zip(&n).map(|(a, &b)| a * b as f64).sum();
            if total == 0 || sbar_num == 0.0 {
                continue;
            }
            cases += 1;
            let w = step_weights(&s, &n, sign).unwrap();
            let mass: f64 = w.alpha.iter().zip(&n).map(|(a, &b)| a * b as f64).sum();
            r.check((mass - total as f64).abs() <= 1e-9, || {
                format!("{sign:?} mass {mass} vs {total} for s={s:?} n={n:?}")
            });
            if sign == AdvantageSign::Negative {
                // independent oracle for the floored raw weights and scale
                let sbar = sbar_num / total as f64;
                let raw: Vec<f64> = s.iter().map(|v| f64::max(2.0 - v / sbar, 0.1)).collect();
                let c = total as f64 / raw.iter().zip(&n).map(|(a, &b)| a * b as f64).sum::<f64>();
                r.check(w.branch == Branch::Negative, || {
                    "negative branch not taken".into()
                });
                for (a, q) in w.alpha.iter().zip(&raw) {
                    r.check(
                        a / c >= NEGATIVE_FLOOR - 1e-12 && (a - c * q).abs() <= 1e-9,
                        || format!("negative weight {a} breaks the floor (c = {c}, raw {q})"),
                    );
                }
            }
            if r.failures.len() > 5 {
                break;
            }
        }
    }
    r.runtime(Duration::from_secs(5));
    r.finish();
}

#[test]
fn ac03_advantage_normalization() {
    let mut r = Report::new("AC3", "advantage normalization");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..10_000 {
        let k = rng.random_range(2..=8);
        let rewards: Vec<f64> = match case % 4 {
            0 => (0..k)
                .map(|_| [0.0, 0.5, 1.0][rng.random_range(0..3)])
                .collect(),
            1 => vec![rng.random::<f64>(); k],
            2 => (0..k).map(|_| rng.random_range(-2.0..2.0)).collect(),
            _ => {
                let base = rng.random::<f64>();
                (0..k)
                    .map(|_| base + rng.random_range(-1e-9..1e-9))
                    .collect()
            }
        };
        let a = group_advantages(&rewards, DEGENERACY_EPS).unwrap();
        // two-pass oracle
        let kf = k as f64;
        let mean = rewards.iter().sum::<f64>() / kf;
        let sd = (rewards.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / kf).sqrt();
        if sd > DEGENERACY_EPS {
            let am = a.iter().sum::<f64>() / kf;
            let asd = (a.iter().map(|x| (x - am).powi(2)).sum::<f64>() / kf).sqrt();
            r.check(am.abs() <= 1e-9 && (asd - 1.0).abs() <= 1e-9, || {
                format!("{rewards:?}: mean {am}, std {asd}")
            });
            for (x, y) in a.iter().zip(rewards.iter().map(|v| (v - mean) / sd)) {
                r.check((x - y).abs() <= 1e-9, || {
                    format!("{rewards:?}: {x} vs oracle {y}")
                });
            }
        } else {
            r.check(a.iter().all(|&x| x == 0.0), || {
                format!("{rewards:?}: degenerate group gave {a:?}")
            });
        }
        if r.failures.len() > 5 {
            break;
        }
    }
    r.finish();
}

#[test]
fn ac04_gradient_correctness() {
    let mut r = Report::new("AC4", "analytic gradient vs central differences");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let contexts = rng.random_range(1..=3);
        let vocab = rng.random_range(2..=4);
        let mut params = PolicyParams::zeros((0..contexts).map(|_| vocab));
        for row in &mut params.rows {
            for v in row.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let reference = {
            let mut p = params.clone();
            for row in &mut p.rows {
                for v in row.iter_mut() {
                    *v += rng.random_range(-0.5..0.5);
                }
            }
            p
        };
        let cfg = ClipConfig {
            kl_coef: rng.random_range(0.0..0.1),
            entropy_coef: rng.random_range(0.0..0.05),
            ..ClipConfig::default()
        };
        // K = 2 trajectories; old log-probs keep every ratio inside the band
        let advantages =
            group_advantages(&[rng.random::<f64>(), rng.random::<f64>()], DEGENERACY_EPS).unwrap();
        let batch: Vec<TrajectoryTerms> = advantages
            .iter()
            .map(|&adv| {
                let len = rng.random_range(1..=6);
                let terms = (0..len)
                    .map(|_| {
                        let row = rng.random_range(0..contexts) as u32;
                        let token = rng.random_range(0..vocab) as u32;
                        let lp = params.logp(row, token);
                        PolicyTerm {
                            row,
                            token,
                            logp_old: lp + rng.random_range(-0.1..0.1),
                            logp_ref: reference.logp(row, token),
                            weight: rng.random_range(0.1..2.0),
                            advantage: adv,
                        }
                    })
                    .collect();
                TrajectoryTerms {
                    terms,
                    normalizer: len as f64,
                    scale: 1.0,
                }
            })
            .collect();
        let out = grpo_loss(&batch, &params, &cfg);
        for i in 0..contexts {
            for j in 0..vocab {
                let mut plus = params.clone();
                plus.rows[i][j] += h;
                let mut minus = params.clone();
                minus.rows[i][j] -= h;
                let fd = (grpo_loss(&batch, &plus, &cfg).loss
                    - grpo_loss(&batch, &minus, &cfg).loss)
                    / (2.0 * h);
                let an = out.grad.rows[i][j];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    r.check(worst <= 1e-4, || format!("max relative error {worst:e}"));
    r.finish();
}

#[test]
fn ac05_routing_totality_and_zero_gradient() {
    let mut r = Report::new("AC5", "routing totality and masked zero gradient");
    for reason in ExitReason::ALL {
        let h = route(reason);
        let hits = [Handling::Normal, Handling::MaskAll, Handling::KeepLastStep]
            .iter()
            .filter(|&&x| x == h)
            .count();
        r.check(hits == 1, || format!("{reason} maps to {hits} handlings"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let task = generate_task("ac5", 8, &mut rng);
    let params = {
        let mut p = new_policy();
        for row in &mut p.rows {
            for v in row.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        p
    };
    let cfg = RolloutConfig::default();
    let cfgc = ClipConfig::default();
    for trial in 0..20 {
        let mut trajs: Vec<_> = (0..4)
            .map(|_| sample_trajectory(&params, &params, &task, &cfg, &mut rng).trajectory)
            .collect();
        for (i, t) in trajs.iter_mut().enumerate() {
            t.reward = [1.0, 0.5, 0.5, 0.0][i];
            t.env_reward = t.reward;
        }
        let masked_reason = [
            ExitReason::ContextLimit,
            ExitReason::Abort,
            ExitReason::MaxTokens,
            ExitReason::ConsecutiveCompileTimeouts,
            ExitReason::EnvironmentSetupFailed,
        ][trial % 5];
        let survivor = trajs[0].clone();
        let mut masked = trajs[0].clone();
        masked.exit_reason = masked_reason;
        trajs[0] = apply_routing(masked, route(masked_reason));

        let with = RolloutGroup::new("p", trajs.clone(), DEGENERACY_EPS).unwrap();
        let mut unmasked = trajs.clone();
        unmasked[0] = survivor;
        let without = RolloutGroup::new("p", unmasked, DEGENERACY_EPS).unwrap();
        r.check(
            with.rewards[0] == 0.0 && with.trajectories.len() == 4,
            || "masked member left the group".into(),
        );
        r.check(with.advantages[1] != without.advantages[1], || {
            "masking did not shift the group baseline".into()
        });

        let t = &with.trajectories[0];
        let w = weakgrpo_core::credit::effective_token_weights(t, with.advantages[0], true);
        let terms = TrajectoryTerms::from_trajectory(t, &w, with.advantages[0], None, 1.0).unwrap();
        let out = grpo_loss(std::slice::from_ref(&terms), &params, &cfgc);
        r.check(terms.terms.is_empty(), || {
            "masked trajectory kept loss terms".into()
        });
        r.check(
            out.grad.rows.iter().flatten().all(|&g| g == 0.0) && out.loss == 0.0,
            || "masked trajectory has gradient".into(),
        );

        // and inside a mixed batch its slot contributes exactly nothing
        let all: Vec<TrajectoryTerms> = with
            .trajectories
            .iter()
            .zip(&with.advantages)
            .map(|(t, &a)| {
                let w = weakgrpo_core::credit::effective_token_weights(t, a, false);
                TrajectoryTerms::from_trajectory(t, &w, a, None, 1.0).unwrap()
            })
            .collect();
        let full = grpo_loss(&all, &params, &cfgc);
        let mut zeroed = all.clone();
        zeroed[0].terms.clear();
        let alt = grpo_loss(&zeroed, &params, &cfgc);
        r.check(
            full.per_trajectory[0] == 0.0 && full.grad == alt.grad,
            || "masked slot changed the batch gradient".into(),
        );
    }
    r.finish();
}

#[test]
fn ac06_scheduler_cap_safety() {
    let mut r = Report::new("AC6", "scheduler cap safety and timeout exit");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for w in 0..1000 {
        let (chains, pools) = random_workload(&mut rng, 40);
        let trace = schedule(&chains, &pools).unwrap();
        let mut now = [0usize; 3];
        for e in &trace {
            let k = PoolKind::ALL.iter().position(|&p| p == e.pool).unwrap();
            match e.kind {
                EventKind::Start => now[k] += 1,
                EventKind::Finish => now[k] -= 1,
            }
            r.check(now[k] <= pools.cap(e.pool), || {
                format!("workload {w}: {} occupancy {} > cap", e.pool, now[k])
            });
        }
        let peak = peak_occupancy(&trace);
        r.check(
            PoolKind::ALL
                .iter()
                .zip(peak)
                .all(|(&p, n)| n <= pools.cap(p)),
            || format!("workload {w}: peak {peak:?}"),
        );
        let tasks: usize = chains.iter().map(|c| c.tasks.len()).sum();
        r.check(trace.len() == 2 * tasks, || {
            format!("workload {w}: {} events for {tasks} tasks", trace.len())
        });
        if r.failures.len() > 5 {
            break;
        }
    }
    for seed in [1u64, 17, 123] {
        let run = |s| {
            let (c, p) = random_workload(&mut ChaCha8Rng::seed_from_u64(s), 40);
            serde_json::to_vec(&schedule(&c, &p).unwrap()).unwrap()
        };
        r.check(run(seed) == run(seed), || {
            format!("seed {seed}: traces differ")
        });
    }

    let limits = ExitLimits::default();
    for _ in 0..1000 {
        let mut events = Vec::new();
        let mut last_timed_out = false;
        for _ in 0..rng.random_range(0..20) {
            events.push(TrajectoryEvent::Turn {
                tokens: vec![rng.random_range(0..100); rng.random_range(1..5)],
                tool_calls: 1,
                finish: false,
            });
            // isolated timeouts only; a successful compile separates them
            let compile = match rng.random_range(0..3) {
                0 => None,
                1 if !last_timed_out => Some(true),
                _ => Some(false),
            };
            if compile.is_some() {
                last_timed_out = compile == Some(true);
            }
            events.push(TrajectoryEvent::Observation { tokens: 3, compile });
        }
        if last_timed_out {
            events.push(TrajectoryEvent::Turn {
                tokens: vec![1],
                tool_calls: 1,
                finish: false,
            });
            events.push(TrajectoryEvent::Observation {
                tokens: 1,
                compile: Some(false),
            });
        }
        let mut monitor = ExitMonitor::new(limits, 0);
        let early = events.iter().find_map(|e| monitor.observe(e));
        r.check(early.is_none(), || {
            format!("prefix already exited with {early:?}")
        });
        for _ in 0..2 {
            events.push(TrajectoryEvent::Turn {
                tokens: vec![2],
                tool_calls: 1,
                finish: false,
            });
            events.push(TrajectoryEvent::Observation {
                tokens: 1,
                compile: Some(true),
            });
        }
        let reason = classify_exit(&events, &limits);
        r.check(reason == ExitReason::ConsecutiveCompileTimeouts, || {
            format!("two timeouts gave {reason}")
        });
    }
    // end to end: every compile times out
    let task = generate_task("ac6", 8, &mut rng);
    let cfg = RolloutConfig {
        compile_timeout: 1.0,
        ..RolloutConfig::default()
    };
    let params = new_policy();
    let mut exercised = 0;
    for _ in 0..300 {
        let t = sample_trajectory(&params, &params, &task, &cfg, &mut rng).trajectory;
        let compiles = t
            .steps
            .iter()
            .filter(|s| s.action == weakgrpo_core::trajectory::ActionKind::Compile)
            .count();
        if compiles >= 2 {
            exercised += 1;
            r.check(
                t.exit_reason == ExitReason::ConsecutiveCompileTimeouts,
                || format!("{compiles} timed-out compiles gave {}", t.exit_reason),
            );
        }
    }
    r.check(exercised > 0, || {
        "no rollout reached a second compile".into()
    });
    r.finish();
}

fn brute_kl(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        if p[i] > 0.0 {
            s += p[i] * (p[i].ln() - q[i].ln());
        }
    }
    s
}

fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    let z: f64 = raw.iter().sum();
    raw.iter().map(|v| v / z).collect()
}

#[test]
fn ac07_kl_correctness() {
    let mut r = Report::new("AC7", "KL correctness, length coupling, shaping shift");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10_000 {
        let n = rng.random_range(2..=8);
        let t = random_dist(&mut rng, n);
        let s = random_dist(&mut rng, n);
        let fwd = token_kl(&t, &s, KlDirection::TeacherToStudent, None).unwrap();
        let rev = token_kl(&t, &s, KlDirection::StudentToTeacher, None).unwrap();
        let full_k = token_kl(&t, &s, KlDirection::TeacherToStudent, Some(n)).unwrap();
        r.check((fwd - brute_kl(&t, &s)).abs() <= 1e-12, || {
            format!("forward {fwd} vs {}", brute_kl(&t, &s))
        });
        r.check((rev - brute_kl(&s, &t)).abs() <= 1e-12, || {
            format!("reverse {rev} vs {}", brute_kl(&s, &t))
        });
        r.check((full_k - fwd).abs() <= 1e-12, || {
            "top-k at full vocabulary differs".into()
        });
        if r.failures.len() > 5 {
            break;
        }
    }
    for _ in 0..1000 {
        let len = rng.random_range(1..20);
        let kl: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
        let mask: Vec<u8> = (0..len).map(|_| u8::from(rng.random_bool(0.7))).collect();
        let doubled_kl: Vec<f64> = kl.iter().chain(&kl).copied().collect();
        let doubled_mask: Vec<u8> = mask.iter().chain(&mask).copied().collect();
        let sum1 = masked_kl(&kl, &mask, Aggregation::MaskedSum)
            .unwrap()
            .total();
        let sum2 = masked_kl(&doubled_kl, &doubled_mask, Aggregation::MaskedSum)
            .unwrap()
            .total();
        let mean1 = masked_kl(&kl, &mask, Aggregation::MaskedMean)
            .unwrap()
            .total();
        let mean2 = masked_kl(&doubled_kl, &doubled_mask, Aggregation::MaskedMean)
            .unwrap()
            .total();
        r.check((sum2 - 2.0 * sum1).abs() <= 1e-12, || {
            format!("masked_sum {sum1} -> {sum2}")
        });
        r.check((mean2 - mean1).abs() <= 1e-12, || {
            format!("masked_mean {mean1} -> {mean2}")
        });
    }
    for _ in 0..1000 {
        let k: usize = rng.random_range(2..=8);
        let tiers: Vec<f64> = (0..k)
            .map(|_| [0.0, 0.5, 1.0][rng.random_range(0..3)])
            .collect();
        let base = group_advantages(&tiers, DEGENERACY_EPS).unwrap();
        let c = [0.25, -3.0, 0.125, 7.5][rng.random_range(0..4)];
        let shifted = group_advantages(
            &tiers
                .iter()
                .map(|&x| shape_reward_opsd(x, c, 1.0))
                .collect::<Vec<_>>(),
            DEGENERACY_EPS,
        )
        .unwrap();
        if k.is_power_of_two() {
            // dyadic rewards, dyadic shift and a power-of-two group: every step is exact
            r.check(shifted == base, || format!("shift {c} changed {tiers:?}"));
        } else {
            r.check(
                base.iter()
                    .zip(&shifted)
                    .all(|(x, y)| (x - y).abs() <= 1e-12),
                || format!("shift {c} moved {tiers:?} beyond rounding"),
            );
        }
        let real: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let kl = rng.random_range(0.0..10.0);
        let a = group_advantages(&real, DEGENERACY_EPS).unwrap();
        let b = group_advantages(
            &real
                .iter()
                .map(|&x| shape_reward_opsd(x, kl, 0.02))
                .collect::<Vec<_>>(),
            DEGENERACY_EPS,
        )
        .unwrap();
        r.check(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-9), || {
            "shared KL penalty changed advantages".into()
        });
    }
    r.finish();
}

#[test]
fn ac08_weak_feedback_construction() {
    let mut r = Report::new("AC8", "weak-feedback task construction");
    let mut checked = 0;
    for seed in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, len) in [6usize, 8, 8, 10, 8].iter().cycle().take(25).enumerate() {
            let task = generate_task(format!("t{seed}-{i}"), *len, &mut rng);
            match task.verify() {
                Ok(shortcuts) => {
                    r.check(!shortcuts.is_empty(), || {
                        format!("{} has no C and not S sequence", task.id)
                    });
                    // independent pass over the same space
                    for seq in task.reachable_space() {
                        let s = task.semantic_check(&seq);
                        let c = task.surface_check(&seq);
                        r.check(!s || c, || format!("{}: S without C", task.id));
                    }
                }
                Err(e) => r.check(false, || format!("{}: {e}", task.id)),
            }
            checked += 1;
        }
    }
    let cfg = RunConfig::default();
    let splits = load_splits(&cfg).unwrap();
    for t in splits.train.iter().chain(&splits.eval) {
        r.check(t.verify().map(|s| !s.is_empty()).unwrap_or(false), || {
            format!("{} fails verification", t.id)
        });
        checked += 1;
    }
    r.check(checked >= 1000, || format!("only {checked} tasks"));
    r.finish();
}

#[test]
fn ac09_directional_reward_hacking() {
    let mut r = Report::new("AC9", "directional reward-hacking experiment");
    let seeds = [1u64, 2, 3, 4, 5];
    let final_eval = |arm: &str, seed: u64| {
        let mut cfg = RunConfig::for_arm(arm).unwrap();
        cfg.seed = seed;
        let splits = load_splits(&cfg).unwrap();
        run_training(&cfg, &splits, Sinks::default())
            .unwrap()
            .records
    };
    let mut s_rate = [0.0; 2];
    let mut c_rate = [0.0; 2];
    let mut layered_half = false;
    for &seed in &seeds {
        for (i, arm) in ["compile_only", "early"].iter().enumerate() {
            let recs = final_eval(arm, seed);
            let last = recs
                .iter()
                .rev()
                .find(|x| x.kind == RecordKind::Eval)
                .unwrap();
            s_rate[i] += last.s_rate / seeds.len() as f64;
            c_rate[i] += last.c_rate / seeds.len() as f64;
            if *arm == "early" {
                layered_half |= recs
                    .iter()
                    .any(|x| x.kind == RecordKind::Train && x.tier_mass.half > 0.0);
            }
        }
        let binary = final_eval("binary", seed);
        let bad = binary
            .iter()
            .filter(|x| x.kind == RecordKind::Train && x.tier_mass.half != 0.0)
            .count();
        r.check(bad == 0, || {
            format!("binary seed {seed}: {bad} updates with 0.5-tier mass")
        });
    }
    let _ = std::io::stderr().write_all(
        format!(
            "    compile_only S {:.3} C {:.3} | layered S {:.3} C {:.3}\n",
            s_rate[0], c_rate[0], s_rate[1], c_rate[1]
        )
        .as_bytes(),
    );
    r.check(s_rate[0] <= s_rate[1], || {
        format!("compile-only S {} > layered S {}", s_rate[0], s_rate[1])
    });
    r.check(c_rate[0] >= c_rate[1] - 0.05, || {
        format!(
            "compile-only C {} < layered C {} - 0.05",
            c_rate[0], c_rate[1]
        )
    });
    r.check(layered_half, || {
        "layered arm never showed 0.5-tier mass".into()
    });
    r.runtime(Duration::from_secs(600));
    r.finish();
}

#[test]
fn ac10_determinism_and_replay() {
    let mut r = Report::new("AC10", "determinism and replay");
    let cfg = RunConfig::for_arm("full").unwrap();
    let splits = load_splits(&cfg).unwrap();
    let log = |cfg: &RunConfig| {
        let mut m = Vec::new();
        run_training(
            cfg,
            &splits,
            Sinks {
                metrics: Some(&mut m),
                replay: None,
            },
        )
        .unwrap();
        m
    };
    let a = log(&cfg);
    r.check(!a.is_empty() && a == log(&cfg), || {
        "metrics logs differ between identical runs".into()
    });

    for (arm, lr) in [
        ("early", None),
        ("full", None),
        ("opsd", None),
        ("pi_distill", Some(2.0)),
    ] {
        let mut c = RunConfig::for_arm(arm).unwrap();
        c.steps = 60;
        if let Some(lr) = lr {
            c.lr = lr;
        }
        let mut buf = Vec::new();
        run_training(
            &c,
            &splits,
            Sinks {
                metrics: None,
                replay: Some(&mut buf),
            },
        )
        .unwrap();
        let rep = replay(std::io::Cursor::new(&buf)).unwrap();
        r.check(
            rep.ok() && rep.max_loss_diff <= 1e-9 && rep.updates == 60,
            || {
                format!(
                    "{arm}: replay diff {:e}, first mismatch {:?}",
                    rep.max_loss_diff,
                    rep.mismatches.first()
                )
            },
        );
    }
    r.finish();
}

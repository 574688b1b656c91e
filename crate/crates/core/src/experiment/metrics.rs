//! Per-update and per-eval metrics records, a schema-checking JSONL writer
//! and a flat CSV exporter.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::governance::ExitReason;
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Train,
    Eval,
}

/// Fraction of trajectories whose environment reward is 0, 0.5 and 1.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TierMass {
    pub zero: f64,
    pub half: f64,
    pub one: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub kind: RecordKind,
    pub arm: String,
    pub update: usize,
    pub trajectories: usize,
    pub mean_reward: f64,
    pub tier_mass: TierMass,
    /// Fraction whose final sequence passes the surface check.
    pub c_rate: f64,
    /// Fraction passing both checks.
    pub s_rate: f64,
    pub mean_steps: f64,
    /// Fraction of trajectories per exit reason; every reason is present.
    pub exit_composition: BTreeMap<String, f64>,
    pub compiled_before_finish: f64,
    pub mean_entropy: f64,
    pub loss: Option<f64>,
    pub grad_norm: Option<f64>,
    pub kl_penalty: Option<f64>,
    pub makespan: Option<f64>,
}

pub struct Rollup {
    pub trajectories: usize,
    pub mean_reward: f64,
    pub tier_mass: TierMass,
    pub c_rate: f64,
    pub s_rate: f64,
    pub mean_steps: f64,
    pub exit_composition: BTreeMap<String, f64>,
}

/// Summary over trajectories. Rewards are the environment rewards before
/// any distillation shaping.
pub fn rollup<'a>(trajs: impl IntoIterator<Item = &'a Trajectory>) -> Rollup {
    let mut counts: BTreeMap<String, f64> = ExitReason::ALL
        .iter()
        .map(|r| (r.to_string(), 0.0))
        .collect();
    let (mut n, mut reward, mut c, mut s, mut steps) = (0usize, 0.0, 0.0, 0.0, 0.0);
    let mut tiers = TierMass::default();
    for t in trajs {
        n += 1;
        reward += t.env_reward;
        if t.env_reward == 0.0 {
            tiers.zero += 1.0;
        } else if t.env_reward == 0.5 {
            tiers.half += 1.0;
        } else if t.env_reward == 1.0 {
            tiers.one += 1.0;
        }
        c += f64::from(u8::from(t.surface_ok));
        s += f64::from(u8::from(t.surface_ok && t.semantic_ok));
        steps += t.steps.len() as f64;
        *counts
            .get_mut(t.exit_reason.as_str())
            .expect("all reasons present") += 1.0;
    }
    let d = n.max(1) as f64;
    for v in counts.values_mut() {
        *v /= d;
    }
    Rollup {
        trajectories: n,
        mean_reward: reward / d,
        tier_mass: TierMass {
            zero: tiers.zero / d,
            half: tiers.half / d,
            one: tiers.one / d,
        },
        c_rate: c / d,
        s_rate: s / d,
        mean_steps: steps / d,
        exit_composition: counts,
    }
}

/// Append-only JSONL writer that fails when a record's key set differs from
/// the first one written.
pub struct MetricsWriter<W: Write> {
    out: W,
    keys: Option<Vec<String>>,
    written: usize,
}

fn key_set(v: &serde_json::Value) -> Vec<String> {
    let mut keys = Vec::new();
    fn walk(prefix: &str, v: &serde_json::Value, keys: &mut Vec<String>) {
        if let serde_json::Value::Object(m) = v {
            for (k, child) in m {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                keys.push(path.clone());
                walk(&path, child, keys);
            }
        }
    }
    walk("", v, &mut keys);
    keys.sort();
    keys
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        Self {
            out,
            keys: None,
            written: 0,
        }
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<(), ExperimentError> {
        self.write_value(&serde_json::to_value(record)?)
    }

    pub fn write_value(&mut self, value: &serde_json::Value) -> Result<(), ExperimentError> {
        let keys = key_set(value);
        match &self.keys {
            None => self.keys = Some(keys),
            Some(expected) if *expected != keys => {
                return Err(ExperimentError::Schema {
                    index: self.written,
                    expected: expected.clone(),
                    found: keys,
                })
            }
            Some(_) => {}
        }
        serde_json::to_writer(&mut self.out, value)?;
        self.out.write_all(b"\n")?;
        self.written += 1;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// One row per record with the raw series; smoothing is left to the reader.
pub fn write_csv<W: Write>(mut out: W, records: &[MetricsRecord]) -> std::io::Result<()> {
    let reasons: Vec<&str> = ExitReason::ALL.iter().map(|r| r.as_str()).collect();
    write!(
        out,
        "kind,arm,update,trajectories,mean_reward,tier_0,tier_0_5,tier_1,c_rate,s_rate,mean_steps,\
         compiled_before_finish,mean_entropy,loss,grad_norm,kl_penalty,makespan"
    )?;
    for r in &reasons {
        write!(out, ",exit_{r}")?;
    }
    writeln!(out)?;
    for rec in records {
        let kind = match rec.kind {
            RecordKind::Train => "train",
            RecordKind::Eval => "eval",
        };
        write!(
            out,
            "{kind},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            rec.arm,
            rec.update,
            rec.trajectories,
            rec.mean_reward,
            rec.tier_mass.zero,
            rec.tier_mass.half,
            rec.tier_mass.one,
            rec.c_rate,
            rec.s_rate,
            rec.mean_steps,
            rec.compiled_before_finish,
            rec.mean_entropy,
            opt(rec.loss),
            opt(rec.grad_norm),
            opt(rec.kl_penalty),
            opt(rec.makespan),
        )?;
        for r in &reasons {
            write!(
                out,
                ",{}",
                rec.exit_composition.get(*r).copied().unwrap_or(0.0)
            )?;
        }
        writeln!(out)?;
    }
    Ok(())
}

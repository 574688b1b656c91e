//! Judge-audit statistics: agreement metrics, Cohen's kappa, Wilson
//! intervals, McNemar's test, Rogan–Gladen correction, kappa bootstrap.

use std::io::BufRead;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("empty table or zero denominator in {0}")]
    Degenerate(&'static str),
    #[error("{successes} successes out of {n}")]
    Proportion { successes: u64, n: u64 },
    #[error("no discordant pairs")]
    NoDiscordant,
    #[error("sensitivity + specificity must exceed 1 (got {0})")]
    Uninformative(f64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io: {0}")]
    Io(String),
}

/// Judge-vs-human confusion counts, "consistent" being the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AuditTable {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl AuditTable {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Counts `(judge, human)` label pairs.
    pub fn from_labels(labels: &[(bool, bool)]) -> Self {
        let mut t = Self::default();
        for &(j, h) in labels {
            match (j, h) {
                (true, true) => t.tp += 1,
                (true, false) => t.fp += 1,
                (false, true) => t.fn_ += 1,
                (false, false) => t.tn += 1,
            }
        }
        t
    }
}

fn parse_label(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "consistent" | "yes" => Some(true),
        "0" | "false" | "inconsistent" | "no" => Some(false),
        _ => None,
    }
}

/// Reads `judge<sep>human` lines; `sep` is a comma, tab or whitespace. Lines
/// starting with `#` and a non-label header line are skipped.
pub fn read_labels<R: BufRead>(input: R) -> Result<Vec<(bool, bool)>, StatsError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| StatsError::Io(e.to_string()))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c == '\t' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        let parsed = match fields.as_slice() {
            [a, b] => parse_label(a).zip(parse_label(b)),
            _ => None,
        };
        match parsed {
            Some(pair) => out.push(pair),
            None if i == 0 => continue,
            None => {
                return Err(StatsError::Parse {
                    line: i + 1,
                    message: format!("expected two labels, got `{line}`"),
                })
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub agreement: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64, what: &'static str) -> Result<f64, StatsError> {
    if den == 0 {
        return Err(StatsError::Degenerate(what));
    }
    Ok(num as f64 / den as f64)
}

pub fn confusion_metrics(t: &AuditTable) -> Result<ConfusionMetrics, StatsError> {
    let agreement = ratio(t.tp + t.tn, t.total(), "agreement")?;
    let precision = ratio(t.tp, t.tp + t.fp, "precision")?;
    let recall = ratio(t.tp, t.tp + t.fn_, "recall")?;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ConfusionMetrics {
        agreement,
        precision,
        recall,
        f1,
    })
}

/// κ = (p_o − p_e)/(1 − p_e). A table where chance agreement is already
/// certain (both raters constant and equal) has κ = 1.
pub fn cohen_kappa(t: &AuditTable) -> Result<f64, StatsError> {
    let n = t.total();
    if n == 0 {
        return Err(StatsError::Degenerate("kappa"));
    }
    let n = n as f64;
    let po = (t.tp + t.tn) as f64 / n;
    let judge_pos = (t.tp + t.fp) as f64 / n;
    let human_pos = (t.tp + t.fn_) as f64 / n;
    let pe = judge_pos * human_pos + (1.0 - judge_pos) * (1.0 - human_pos);
    if (1.0 - pe).abs() < 1e-15 {
        return Ok(if po == 1.0 { 1.0 } else { 0.0 });
    }
    Ok((po - pe) / (1.0 - pe))
}

/// Wilson score interval for `successes / n`.
pub fn wilson_ci(successes: u64, n: u64, z: f64) -> Result<(f64, f64), StatsError> {
    if n == 0 || successes > n {
        return Err(StatsError::Proportion { successes, n });
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    Ok(((center - half).max(0.0), (center + half).min(1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemar {
    pub chi2: f64,
    pub p_value: f64,
}

/// McNemar's test without continuity correction.
pub fn mcnemar(b: u64, c: u64) -> Result<McNemar, StatsError> {
    if b + c == 0 {
        return Err(StatsError::NoDiscordant);
    }
    let d = b as f64 - c as f64;
    let chi2 = d * d / (b + c) as f64;
    // upper tail of chi-square(1): Q(1/2, x/2)
    let p_value = if chi2 == 0.0 {
        1.0
    } else {
        gamma_ur(0.5, chi2 / 2.0)
    };
    Ok(McNemar { chi2, p_value })
}

/// Prevalence corrected for judge error, clamped to [0, 1].
pub fn rogan_gladen(p_obs: f64, sensitivity: f64, specificity: f64) -> Result<f64, StatsError> {
    let j = sensitivity + specificity - 1.0;
    if j <= 0.0 {
        return Err(StatsError::Uninformative(sensitivity + specificity));
    }
    Ok(((p_obs - (1.0 - specificity)) / j).clamp(0.0, 1.0))
}

/// Percentile bootstrap interval for κ over resampled label pairs.
pub fn bootstrap_kappa_ci<R: Rng + ?Sized>(
    labels: &[(bool, bool)],
    resamples: usize,
    level: f64,
    rng: &mut R,
) -> Result<(f64, f64), StatsError> {
    if labels.is_empty() || resamples == 0 {
        return Err(StatsError::Degenerate("bootstrap"));
    }
    let n = labels.len();
    let mut kappas = Vec::with_capacity(resamples);
    let mut sample = Vec::with_capacity(n);
    for _ in 0..resamples {
        sample.clear();
        sample.extend((0..n).map(|_| labels[rng.random_range(0..n)]));
        kappas.push(cohen_kappa(&AuditTable::from_labels(&sample))?);
    }
    kappas.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile(&kappas, tail), quantile(&kappas, 1.0 - tail)))
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Everything the audit command prints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub table: AuditTable,
    pub metrics: ConfusionMetrics,
    pub kappa: f64,
    pub kappa_ci: (f64, f64),
    pub agreement_ci: (f64, f64),
}

pub fn audit_report<R: Rng + ?Sized>(
    labels: &[(bool, bool)],
    resamples: usize,
    rng: &mut R,
) -> Result<AuditReport, StatsError> {
    let table = AuditTable::from_labels(labels);
    Ok(AuditReport {
        table,
        metrics: confusion_metrics(&table)?,
        kappa: cohen_kappa(&table)?,
        kappa_ci: bootstrap_kappa_ci(labels, resamples, 0.95, rng)?,
        agreement_ci: wilson_ci(table.tp + table.tn, table.total(), 1.96)?,
    })
}

/// Expands a table back into label pairs.
pub fn labels_from_table(t: &AuditTable) -> Vec<(bool, bool)> {
    let mut v = Vec::with_capacity(t.total() as usize);
    v.extend(std::iter::repeat_n((true, true), t.tp as usize));
    v.extend(std::iter::repeat_n((true, false), t.fp as usize));
    v.extend(std::iter::repeat_n((false, true), t.fn_ as usize));
    v.extend(std::iter::repeat_n((false, false), t.tn as usize));
    v
}

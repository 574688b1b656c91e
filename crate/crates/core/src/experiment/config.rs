//! Run configuration: defaults, arm presets, and the `key = value` file
//! format with dotted keys.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::distill::{Aggregation, DistillMode, KlConfig, Mode};
use crate::governance::{ExitLimits, PoolConfig};
use crate::grpo::{ClipConfig, DEGENERACY_EPS};
use crate::reward::{RewardScheme, SyntheticJudge};
use crate::toyfix::rollout::SLOT_WIDTHS;
use crate::toyfix::task::DEFAULT_LENGTH;
use crate::toyfix::{RolloutConfig, ScorerConfig};

pub const ARMS: [&str; 6] = [
    "compile_only",
    "binary",
    "early",
    "full",
    "opsd",
    "pi_distill",
];

/// Task split given either as a count to generate or as a task file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSource {
    Generate(usize),
    File(PathBuf),
}

impl FromStr for TaskSource {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.parse::<usize>() {
            Ok(n) => TaskSource::Generate(n),
            Err(_) => TaskSource::File(PathBuf::from(s)),
        })
    }
}

impl fmt::Display for TaskSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskSource::Generate(n) => write!(f, "{n}"),
            TaskSource::File(p) => write!(f, "{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillSettings {
    /// `None` is `off`.
    pub mode: Option<Mode>,
    /// Defaults to 0.02 for OPSD and 0.01 for π-Distill when unset.
    pub beta: Option<f64>,
    pub alpha: f64,
    pub aggregation: Aggregation,
    pub topk: Option<usize>,
}

impl DistillSettings {
    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(match self.mode {
            Some(Mode::Opsd) => 0.02,
            _ => 0.01,
        })
    }

    pub fn mode(&self) -> Option<DistillMode> {
        self.mode.map(|mode| DistillMode {
            mode,
            alpha: self.alpha,
        })
    }

    pub fn kl_config(&self) -> Option<KlConfig> {
        let mode = self.mode()?;
        Some(KlConfig {
            direction: mode.direction(),
            aggregation: self.aggregation,
            beta: self.beta(),
            topk: self.topk,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub arm: String,
    pub scheme: RewardScheme,
    pub judge: SyntheticJudge,
    pub process_scores: bool,
    pub scorer: ScorerConfig,
    pub distill: DistillSettings,
    pub group_size: usize,
    pub clip: ClipConfig,
    pub degeneracy_eps: f64,
    pub pools: PoolConfig,
    pub limits: ExitLimits,
    pub compile_timeout: f64,
    pub setup_failure: f64,
    pub lr: f64,
    pub steps: usize,
    pub eval_interval: usize,
    pub seed: u64,
    pub batch_prompts: usize,
    pub temperature: f64,
    pub init_params: Option<PathBuf>,
    /// Write per-group loss records for `replay`.
    pub record_replay: bool,
    pub eval_temperature: f64,
    pub eval_samples: usize,
    pub train_tasks: TaskSource,
    pub eval_tasks: TaskSource,
    pub data_seed: u64,
    pub task_length: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arm: "early".into(),
            scheme: RewardScheme::Layered,
            judge: SyntheticJudge::default(),
            process_scores: false,
            scorer: ScorerConfig::default(),
            distill: DistillSettings {
                mode: None,
                beta: None,
                alpha: 0.5,
                aggregation: Aggregation::MaskedSum,
                topk: None,
            },
            group_size: 4,
            clip: ClipConfig::default(),
            degeneracy_eps: DEGENERACY_EPS,
            pools: PoolConfig::default(),
            limits: ExitLimits {
                max_steps: 12,
                ..ExitLimits::default()
            },
            compile_timeout: 0.0,
            setup_failure: 0.0,
            lr: 10.0,
            steps: 300,
            eval_interval: 25,
            seed: 0,
            batch_prompts: 8,
            temperature: 1.0,
            init_params: None,
            record_replay: false,
            eval_temperature: 1.0,
            eval_samples: 4,
            train_tasks: TaskSource::Generate(64),
            eval_tasks: TaskSource::Generate(32),
            data_seed: 7,
            task_length: DEFAULT_LENGTH,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ExperimentError> {
    value
        .parse()
        .map_err(|_| ExperimentError::Config(format!("bad value `{value}` for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ExperimentError> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(ExperimentError::Config(format!(
            "bad boolean `{value}` for {key}"
        ))),
    }
}

impl RunConfig {
    /// Defaults with an arm preset applied.
    pub fn for_arm(arm: &str) -> Result<Self, ExperimentError> {
        let mut cfg = Self::default();
        cfg.apply_arm(arm)?;
        Ok(cfg)
    }

    pub fn apply_arm(&mut self, arm: &str) -> Result<(), ExperimentError> {
        let (scheme, scores, mode) = match arm {
            "compile_only" => (RewardScheme::CompileOnly, false, None),
            "binary" => (RewardScheme::Binary, false, None),
            "early" => (RewardScheme::Layered, false, None),
            "full" => (RewardScheme::Layered, true, None),
            "opsd" => (RewardScheme::Layered, false, Some(Mode::Opsd)),
            "pi_distill" => (RewardScheme::Layered, false, Some(Mode::PiDistill)),
            _ => return Err(ExperimentError::Config(format!("unknown arm `{arm}`"))),
        };
        self.arm = arm.to_string();
        self.scheme = scheme;
        self.process_scores = scores;
        self.distill.mode = mode;
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ExperimentError> {
        match key {
            "arm" => self.apply_arm(value)?,
            "reward.scheme" => {
                self.scheme = value.parse().map_err(|_| {
                    ExperimentError::Config(format!("unknown reward scheme `{value}`"))
                })?
            }
            "reward.judge_sensitivity" => self.judge.sensitivity = parse(key, value)?,
            "reward.judge_specificity" => self.judge.specificity = parse(key, value)?,
            "reward.judge_fault_rate" => self.judge.fault_rate = parse(key, value)?,
            "reward.judge_retries" => self.judge.retries = parse(key, value)?,
            "process_scores.enabled" => self.process_scores = parse_bool(key, value)?,
            "process_scores.compile_base" => self.scorer.compile_base = parse(key, value)?,
            "distill.mode" => {
                self.distill.mode = match value {
                    "off" => None,
                    other => Some(
                        other
                            .parse()
                            .map_err(|e| ExperimentError::Config(format!("{e}")))?,
                    ),
                }
            }
            "distill.beta" => self.distill.beta = Some(parse(key, value)?),
            "distill.alpha" => self.distill.alpha = parse(key, value)?,
            "distill.aggregation" => {
                self.distill.aggregation = value
                    .parse()
                    .map_err(|e| ExperimentError::Config(format!("{e}")))?
            }
            "distill.topk" => {
                self.distill.topk = match value {
                    "none" | "off" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "grpo.k" => self.group_size = parse(key, value)?,
            "grpo.eps_lo" => self.clip.eps_lo = parse(key, value)?,
            "grpo.eps_hi" => self.clip.eps_hi = parse(key, value)?,
            "grpo.kl_coef" => self.clip.kl_coef = parse(key, value)?,
            "grpo.entropy_coef" => self.clip.entropy_coef = parse(key, value)?,
            "grpo.degeneracy_eps" => self.degeneracy_eps = parse(key, value)?,
            "pools.inference_cap" => self.pools.inference_cap = parse(key, value)?,
            "pools.sandbox_cap" => self.pools.sandbox_cap = parse(key, value)?,
            "pools.compile_cap" => self.pools.compile_cap = parse(key, value)?,
            "pools.compile_timeout_threshold" => {
                let t: u32 = parse(key, value)?;
                self.pools.compile_timeout_threshold = t;
                self.limits.compile_timeout_threshold = t;
            }
            "limits.max_steps" => self.limits.max_steps = parse(key, value)?,
            "limits.max_context_tokens" => self.limits.max_context_tokens = parse(key, value)?,
            "limits.max_step_tokens" => self.limits.max_step_tokens = parse(key, value)?,
            "faults.compile_timeout" => self.compile_timeout = parse(key, value)?,
            "faults.setup_failure" => self.setup_failure = parse(key, value)?,
            "train.lr" => self.lr = parse(key, value)?,
            "train.steps" => self.steps = parse(key, value)?,
            "train.eval_interval" => self.eval_interval = parse(key, value)?,
            "train.seed" => self.seed = parse(key, value)?,
            "train.batch_prompts" => self.batch_prompts = parse(key, value)?,
            "train.temperature" => self.temperature = parse(key, value)?,
            "train.init_params" => self.init_params = Some(PathBuf::from(value)),
            "train.record_replay" => self.record_replay = parse_bool(key, value)?,
            "eval.temperature" => self.eval_temperature = parse(key, value)?,
            "eval.samples_per_task" => self.eval_samples = parse(key, value)?,
            "data.train_tasks" => self.train_tasks = parse(key, value)?,
            "data.eval_tasks" => self.eval_tasks = parse(key, value)?,
            "data.seed" => self.data_seed = parse(key, value)?,
            "data.length" => self.task_length = parse(key, value)?,
            _ => return Err(ExperimentError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines (`#` comments) onto `self`. An `arm` line
    /// is applied first so explicit keys override the preset.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ExperimentError> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                ExperimentError::Config(format!("line {}: expected key = value", i + 1))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some((_, arm)) = pairs.iter().rev().find(|(k, _)| k == "arm") {
            self.apply_arm(arm)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "arm") {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Checks every constraint that can be checked before loading tasks.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.group_size < 2 {
            return bad(format!(
                "grpo.k must be at least 2, got {}",
                self.group_size
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", self.lr));
        }
        if self.steps == 0
            || self.eval_interval == 0
            || self.batch_prompts == 0
            || self.eval_samples == 0
        {
            return bad("train.steps, train.eval_interval, train.batch_prompts and eval.samples_per_task must be positive".into());
        }
        if !(self.clip.eps_lo >= 0.0 && self.clip.eps_lo < 1.0 && self.clip.eps_hi >= 0.0) {
            return bad("clip bounds must satisfy 0 ≤ eps_lo < 1 and eps_hi ≥ 0".into());
        }
        if !(self.clip.kl_coef >= 0.0
            && self.clip.entropy_coef >= 0.0
            && self.degeneracy_eps >= 0.0)
        {
            return bad("kl_coef, entropy_coef and degeneracy_eps must be nonnegative".into());
        }
        if !(prob(self.compile_timeout) && prob(self.setup_failure)) {
            return bad("fault probabilities must lie in [0, 1]".into());
        }
        if !(prob(self.judge.sensitivity)
            && prob(self.judge.specificity)
            && prob(self.judge.fault_rate))
        {
            return bad("judge rates must lie in [0, 1]".into());
        }
        if !(self.temperature >= 0.0 && self.eval_temperature >= 0.0) {
            return bad("temperatures must be nonnegative".into());
        }
        if self.task_length < 4 || self.task_length % 2 == 1 {
            return bad(format!(
                "data.length must be even and at least 4, got {}",
                self.task_length
            ));
        }
        if self.limits.max_steps == 0 {
            return bad("limits.max_steps must be positive".into());
        }
        for pool in crate::governance::PoolKind::ALL {
            if self.pools.cap(pool) == 0 {
                return bad(format!("pools.{pool}_cap must be positive"));
            }
        }
        if let Some(kl) = self.distill.kl_config() {
            kl.validate()
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
            DistillMode::new(kl_mode(self), self.distill.alpha)
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
            if let Some(k) = kl.topk {
                let widest = *SLOT_WIDTHS.iter().max().unwrap_or(&0);
                if k > widest {
                    return bad(format!(
                        "distill.topk {k} exceeds the largest vocabulary ({widest})"
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn rollout(&self, hint_visible: bool, temperature: f64) -> RolloutConfig {
        RolloutConfig {
            limits: self.limits,
            temperature,
            compile_timeout: self.compile_timeout,
            setup_failure: self.setup_failure,
            hint_visible,
            scorer: self.scorer,
        }
    }

    /// Canonical `key = value` rendering, readable back by [`Self::apply_text`].
    pub fn to_text(&self) -> String {
        let d = &self.distill;
        let opt = |v: Option<usize>| v.map_or("none".to_string(), |k| k.to_string());
        let lines = [
            ("arm", self.arm.clone()),
            ("reward.scheme", self.scheme.to_string()),
            (
                "reward.judge_sensitivity",
                self.judge.sensitivity.to_string(),
            ),
            (
                "reward.judge_specificity",
                self.judge.specificity.to_string(),
            ),
            ("reward.judge_fault_rate", self.judge.fault_rate.to_string()),
            ("reward.judge_retries", self.judge.retries.to_string()),
            ("process_scores.enabled", self.process_scores.to_string()),
            (
                "process_scores.compile_base",
                self.scorer.compile_base.to_string(),
            ),
            (
                "distill.mode",
                d.mode.map_or("off".to_string(), |m| m.to_string()),
            ),
            ("distill.beta", d.beta().to_string()),
            ("distill.alpha", d.alpha.to_string()),
            ("distill.aggregation", d.aggregation.to_string()),
            ("distill.topk", opt(d.topk)),
            ("grpo.k", self.group_size.to_string()),
            ("grpo.eps_lo", self.clip.eps_lo.to_string()),
            ("grpo.eps_hi", self.clip.eps_hi.to_string()),
            ("grpo.kl_coef", self.clip.kl_coef.to_string()),
            ("grpo.entropy_coef", self.clip.entropy_coef.to_string()),
            ("grpo.degeneracy_eps", self.degeneracy_eps.to_string()),
            ("pools.inference_cap", self.pools.inference_cap.to_string()),
            ("pools.sandbox_cap", self.pools.sandbox_cap.to_string()),
            ("pools.compile_cap", self.pools.compile_cap.to_string()),
            (
                "pools.compile_timeout_threshold",
                self.pools.compile_timeout_threshold.to_string(),
            ),
            ("limits.max_steps", self.limits.max_steps.to_string()),
            (
                "limits.max_context_tokens",
                self.limits.max_context_tokens.to_string(),
            ),
            (
                "limits.max_step_tokens",
                self.limits.max_step_tokens.to_string(),
            ),
            ("faults.compile_timeout", self.compile_timeout.to_string()),
            ("faults.setup_failure", self.setup_failure.to_string()),
            ("train.lr", self.lr.to_string()),
            ("train.steps", self.steps.to_string()),
            ("train.eval_interval", self.eval_interval.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.batch_prompts", self.batch_prompts.to_string()),
            ("train.temperature", self.temperature.to_string()),
            ("train.record_replay", self.record_replay.to_string()),
            ("eval.temperature", self.eval_temperature.to_string()),
            ("eval.samples_per_task", self.eval_samples.to_string()),
            ("data.train_tasks", self.train_tasks.to_string()),
            ("data.eval_tasks", self.eval_tasks.to_string()),
            ("data.seed", self.data_seed.to_string()),
            ("data.length", self.task_length.to_string()),
        ];
        let mut out: String = lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        if let Some(p) = &self.init_params {
            out.push_str(&format!("train.init_params = {}\n", p.display()));
        }
        out
    }
}

fn kl_mode(cfg: &RunConfig) -> Mode {
    cfg.distill.mode.unwrap_or(Mode::Opsd)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_differ_only_in_arm_keys() {
        let base = RunConfig::default();
        for arm in ARMS {
            let cfg = RunConfig::for_arm(arm).unwrap();
            assert_eq!(cfg.group_size, base.group_size);
            assert_eq!(cfg.lr, base.lr);
            cfg.validate().unwrap();
        }
        assert_eq!(
            RunConfig::for_arm("binary").unwrap().scheme,
            RewardScheme::Binary
        );
        assert!(RunConfig::for_arm("full").unwrap().process_scores);
        assert!(RunConfig::for_arm("nope").is_err());
    }

    #[test]
    fn file_keys_override_preset() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# comment\ntrain.steps = 7\narm = full\nprocess_scores.enabled = false\ndistill.topk = 3 # inline\n")
            .unwrap();
        assert_eq!(cfg.arm, "full");
        assert!(!cfg.process_scores);
        assert_eq!((cfg.steps, cfg.distill.topk), (7, Some(3)));
    }

    #[test]
    fn text_roundtrip() {
        let mut cfg = RunConfig::for_arm("pi_distill").unwrap();
        cfg.steps = 11;
        cfg.train_tasks = TaskSource::File("tasks/train.jsonl".into());
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        cfg.distill.beta = Some(cfg.distill.beta());
        assert_eq!(back, cfg);
    }

    #[test]
    fn inconsistencies_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_text("grpo.k = x").is_err());
        assert!(cfg.apply_text("unknown.key = 1").is_err());
        assert!(cfg.apply_text("no equals sign").is_err());
        for text in [
            "grpo.k = 1",
            "train.lr = 0",
            "faults.compile_timeout = 2",
            "pools.compile_cap = 0",
            "data.length = 7",
        ] {
            let mut c = RunConfig::default();
            c.apply_text(text).unwrap();
            assert!(c.validate().is_err(), "{text}");
        }
        let mut c = RunConfig::for_arm("opsd").unwrap();
        c.apply_text("distill.beta = -1").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::for_arm("pi_distill").unwrap();
        c.apply_text("distill.alpha = 1.5").unwrap();
        assert!(c.validate().is_err());
        assert_eq!(RunConfig::for_arm("opsd").unwrap().distill.beta(), 0.02);
        assert_eq!(
            RunConfig::for_arm("pi_distill").unwrap().distill.beta(),
            0.01
        );
    }
}

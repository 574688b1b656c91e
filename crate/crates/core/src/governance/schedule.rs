//! Discrete-event scheduling of rollout work over three capped pools.
//!
//! Each trajectory is a [`Chain`] of tasks that run one after another; a task
//! becomes ready when its predecessor finishes, so an inference slot is always
//! released before the tool call it produced can start. Pools are independent:
//! a full compile queue never delays sandbox or inference work.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("unknown resource pool `{0}`")]
    UnknownPool(String),
    #[error("pool {0} has capacity 0")]
    ZeroCap(PoolKind),
    #[error("chain {chain} task {index} has zero duration")]
    ZeroDuration { chain: usize, index: usize },
    #[error("malformed task `{0}` (expected <pool>:<duration>)")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Inference,
    Sandbox,
    Compile,
}

impl PoolKind {
    pub const ALL: [PoolKind; 3] = [PoolKind::Inference, PoolKind::Sandbox, PoolKind::Compile];

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolKind::Inference => "inference",
            PoolKind::Sandbox => "sandbox",
            PoolKind::Compile => "compile",
        })
    }
}

impl FromStr for PoolKind {
    type Err = ScheduleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inference" => Ok(PoolKind::Inference),
            "sandbox" => Ok(PoolKind::Sandbox),
            "compile" => Ok(PoolKind::Compile),
            other => Err(ScheduleError::UnknownPool(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub inference_cap: usize,
    pub sandbox_cap: usize,
    pub compile_cap: usize,
    pub compile_timeout_threshold: u32,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            inference_cap: 8,
            sandbox_cap: 8,
            compile_cap: 2,
            compile_timeout_threshold: 2,
        }
    }
}

impl PoolConfig {
    pub fn cap(&self, pool: PoolKind) -> usize {
        match pool {
            PoolKind::Inference => self.inference_cap,
            PoolKind::Sandbox => self.sandbox_cap,
            PoolKind::Compile => self.compile_cap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub pool: PoolKind,
    pub duration: u64,
}

impl FromStr for TaskSpec {
    type Err = ScheduleError;

    /// `compile:3` style.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (pool, dur) = s
            .split_once(':')
            .ok_or_else(|| ScheduleError::Malformed(s.to_string()))?;
        Ok(TaskSpec {
            pool: pool.trim().parse()?,
            duration: dur
                .trim()
                .parse()
                .map_err(|_| ScheduleError::Malformed(s.to_string()))?,
        })
    }
}

/// Sequential work of one trajectory, released at `release`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chain {
    pub release: u64,
    pub tasks: Vec<TaskSpec>,
}

impl Chain {
    /// Parses whitespace-separated `pool:duration` items.
    pub fn parse(release: u64, spec: &str) -> Result<Self, ScheduleError> {
        let tasks = spec
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()?;
        Ok(Chain { release, tasks })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Start,
    Finish,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time: u64,
    pub kind: EventKind,
    pub chain: usize,
    pub index: usize,
    pub pool: PoolKind,
}

/// Runs the workload to completion and returns the ordered event trace.
///
/// At any instant finishes are processed before starts, and waiting tasks are
/// served FIFO by (ready time, chain, index).
pub fn schedule(chains: &[Chain], pools: &PoolConfig) -> Result<Vec<TraceEvent>, ScheduleError> {
    for pool in PoolKind::ALL {
        if pools.cap(pool) == 0 {
            return Err(ScheduleError::ZeroCap(pool));
        }
    }
    for (c, chain) in chains.iter().enumerate() {
        if let Some(index) = chain.tasks.iter().position(|t| t.duration == 0) {
            return Err(ScheduleError::ZeroDuration { chain: c, index });
        }
    }

    let mut trace = Vec::new();
    let mut waiting: [BinaryHeap<Reverse<(u64, usize, usize)>>; 3] = Default::default();
    let mut running: BinaryHeap<Reverse<(u64, usize, usize)>> = BinaryHeap::new();
    let mut busy = [0usize; 3];
    let mut releases: Vec<(u64, usize)> = chains
        .iter()
        .enumerate()
        .filter(|(_, ch)| !ch.tasks.is_empty())
        .map(|(c, ch)| (ch.release, c))
        .collect();
    releases.sort_unstable();
    let mut next_release = 0;

    let mut now = match releases.first() {
        Some(&(t, _)) => t,
        None => return Ok(trace),
    };
    loop {
        while let Some(&Reverse((t, c, i))) = running.peek() {
            if t != now {
                break;
            }
            running.pop();
            let pool = chains[c].tasks[i].pool;
            busy[pool.index()] -= 1;
            trace.push(TraceEvent {
                time: now,
                kind: EventKind::Finish,
                chain: c,
                index: i,
                pool,
            });
            if let Some(next) = chains[c].tasks.get(i + 1) {
                waiting[next.pool.index()].push(Reverse((now, c, i + 1)));
            }
        }
        while next_release < releases.len() && releases[next_release].0 == now {
            let c = releases[next_release].1;
            waiting[chains[c].tasks[0].pool.index()].push(Reverse((now, c, 0)));
            next_release += 1;
        }
        for pool in PoolKind::ALL {
            let k = pool.index();
            while busy[k] < pools.cap(pool) {
                let Some(Reverse((_, c, i))) = waiting[k].pop() else {
                    break;
                };
                busy[k] += 1;
                trace.push(TraceEvent {
                    time: now,
                    kind: EventKind::Start,
                    chain: c,
                    index: i,
                    pool,
                });
                running.push(Reverse((now + chains[c].tasks[i].duration, c, i)));
            }
        }
        let next_finish = running.peek().map(|Reverse((t, _, _))| *t);
        let next_arrival = releases.get(next_release).map(|&(t, _)| t);
        now = match (next_finish, next_arrival) {
            (Some(a), Some(b)) => a.min(b),
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => break,
        };
    }
    Ok(trace)
}

/// Peak concurrent occupancy per pool, replayed from a trace.
pub fn peak_occupancy(trace: &[TraceEvent]) -> [usize; 3] {
    let mut now = [0usize; 3];
    let mut peak = [0usize; 3];
    for e in trace {
        let k = e.pool.index();
        match e.kind {
            EventKind::Start => {
                now[k] += 1;
                peak[k] = peak[k].max(now[k]);
            }
            EventKind::Finish => now[k] -= 1,
        }
    }
    peak
}

pub fn makespan(trace: &[TraceEvent]) -> u64 {
    trace.iter().map(|e| e.time).max().unwrap_or(0)
}

/// Random caps and chains for stress tests: 1..=`max_chains` chains, each
/// alternating inference with a sandbox or compile call, released over time.
pub fn random_workload<R: Rng + ?Sized>(
    rng: &mut R,
    max_chains: usize,
) -> (Vec<Chain>, PoolConfig) {
    let pools = PoolConfig {
        inference_cap: rng.random_range(1..=8),
        sandbox_cap: rng.random_range(1..=8),
        compile_cap: rng.random_range(1..=3),
        compile_timeout_threshold: 2,
    };
    let n = rng.random_range(1..=max_chains.max(1));
    let chains = (0..n)
        .map(|_| {
            let steps = rng.random_range(1..=6);
            let mut tasks = Vec::with_capacity(2 * steps);
            for _ in 0..steps {
                tasks.push(TaskSpec {
                    pool: PoolKind::Inference,
                    duration: rng.random_range(1..=5),
                });
                let pool = if rng.random_bool(0.4) {
                    PoolKind::Compile
                } else {
                    PoolKind::Sandbox
                };
                tasks.push(TaskSpec {
                    pool,
                    duration: rng.random_range(1..=8),
                });
            }
            Chain {
                release: rng.random_range(0..20),
                tasks,
            }
        })
        .collect();
    (chains, pools)
}

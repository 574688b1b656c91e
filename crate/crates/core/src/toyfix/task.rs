//! Bracket-repair tasks. The surface check `C` is bracket balance; the
//! semantic check `S` is membership in the target's class, which is every
//! reordering of the target's top-level balanced groups.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ToyError;

pub type Seq = Vec<u8>;

pub const ALPHABET: [char; 6] = ['(', ')', '[', ']', '{', '}'];
pub const SURFACE_RULE: &str = "balanced_brackets";
pub const DEFAULT_LENGTH: usize = 8;

pub fn is_open(sym: u8) -> bool {
    sym.is_multiple_of(2)
}

/// Bracket type (0, 1, 2) of a symbol.
pub fn kind(sym: u8) -> u8 {
    sym / 2
}

pub fn open_of(kind: u8) -> u8 {
    kind * 2
}

pub fn close_of(kind: u8) -> u8 {
    kind * 2 + 1
}

pub fn render(seq: &[u8]) -> String {
    seq.iter().map(|&s| ALPHABET[s as usize]).collect()
}

pub fn parse_seq(s: &str) -> Result<Seq, ToyError> {
    s.chars()
        .map(|c| {
            ALPHABET
                .iter()
                .position(|&a| a == c)
                .map(|i| i as u8)
                .ok_or(ToyError::BadSymbol(c))
        })
        .collect()
}

/// Where balance first breaks: the offending position and the unmatched
/// opener it was checked against, if any. A sequence that ends with open
/// brackets reports the end position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub pos: usize,
    pub partner: Option<usize>,
}

pub fn first_violation(seq: &[u8]) -> Option<Violation> {
    let mut stack: Vec<usize> = Vec::new();
    for (i, &s) in seq.iter().enumerate() {
        if is_open(s) {
            stack.push(i);
            continue;
        }
        match stack.pop() {
            Some(j) if kind(seq[j]) == kind(s) => {}
            Some(j) => {
                return Some(Violation {
                    pos: i,
                    partner: Some(j),
                })
            }
            None => {
                return Some(Violation {
                    pos: i,
                    partner: None,
                })
            }
        }
    }
    stack.last().map(|&j| Violation {
        pos: seq.len(),
        partner: Some(j),
    })
}

pub fn surface_check(seq: &[u8]) -> bool {
    first_violation(seq).is_none()
}

/// Splits a balanced sequence into its top-level groups.
pub fn top_level_groups(seq: &[u8]) -> Vec<Seq> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = 0;
    for (i, &s) in seq.iter().enumerate() {
        if is_open(s) {
            depth += 1;
        } else {
            depth = depth.saturating_sub(1);
            if depth == 0 {
                out.push(seq[start..=i].to_vec());
                start = i + 1;
            }
        }
    }
    out
}

/// Class identifier: sorted top-level groups joined by `|`.
pub fn class_key(seq: &[u8]) -> String {
    let mut groups: Vec<String> = top_level_groups(seq).iter().map(|g| render(g)).collect();
    groups.sort();
    groups.join("|")
}

/// Every distinct ordering of the target's top-level groups.
pub fn enumerate_class(target: &[u8]) -> BTreeSet<Seq> {
    let mut groups = top_level_groups(target);
    groups.sort();
    let mut out = BTreeSet::new();
    permute(&mut groups, 0, &mut out);
    out
}

fn permute(groups: &mut Vec<Seq>, k: usize, out: &mut BTreeSet<Seq>) {
    if k == groups.len() {
        out.insert(groups.concat());
        return;
    }
    for i in k..groups.len() {
        groups.swap(k, i);
        permute(groups, k + 1, out);
        groups.swap(k, i);
    }
}

/// The compile-passing placeholder `()()…` of a given length.
pub fn stub(len: usize) -> Seq {
    (0..len).map(|i| if i % 2 == 0 { 0 } else { 1 }).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyTask {
    pub id: String,
    #[serde(with = "seq_text")]
    pub initial_sequence: Seq,
    #[serde(with = "seq_text")]
    pub gt_repair: Seq,
    pub surface_rule: String,
    pub semantic_class: String,
}

mod seq_text {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(seq: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::render(seq))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        super::parse_seq(&text).map_err(serde::de::Error::custom)
    }
}

/// Which side of the reported violation was corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Error,
    Partner,
}

impl ToyTask {
    pub fn semantic_check(&self, seq: &[u8]) -> bool {
        surface_check(seq) && class_key(seq) == self.semantic_class
    }

    pub fn surface_check(&self, seq: &[u8]) -> bool {
        surface_check(seq)
    }

    pub fn class(&self) -> BTreeSet<Seq> {
        enumerate_class(&self.gt_repair)
    }

    pub fn len(&self) -> usize {
        self.initial_sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.initial_sequence.is_empty()
    }

    /// The violation the first compile reports.
    pub fn error_site(&self) -> (usize, usize) {
        let v = first_violation(&self.initial_sequence)
            .expect("generated tasks fail the surface check");
        (
            v.pos,
            v.partner.expect("single-type corruption leaves a partner"),
        )
    }

    /// Position that differs from the target, i.e. the "recently changed" one.
    pub fn corrupted_position(&self) -> Option<usize> {
        self.initial_sequence
            .iter()
            .zip(&self.gt_repair)
            .position(|(a, b)| a != b)
    }

    pub fn corrupted_side(&self) -> Side {
        let (pos, _) = self.error_site();
        if self.corrupted_position() == Some(pos) {
            Side::Error
        } else {
            Side::Partner
        }
    }

    /// Min Hamming distance from `seq` to any class member.
    pub fn distance(&self, seq: &[u8]) -> usize {
        self.class()
            .iter()
            .map(|m| {
                if m.len() != seq.len() {
                    usize::MAX
                } else {
                    m.iter().zip(seq).filter(|(a, b)| a != b).count()
                }
            })
            .min()
            .unwrap_or(usize::MAX)
    }

    /// Sequences within Hamming distance 2 of the initial sequence or of the
    /// stub: a superset of what the agent's edits can produce.
    pub fn reachable_space(&self) -> BTreeSet<Seq> {
        let mut out = BTreeSet::new();
        for center in [self.initial_sequence.clone(), stub(self.len())] {
            hamming_ball(&center, 2, &mut out);
        }
        out.extend(self.class());
        out
    }

    /// Exhaustive check over [`Self::reachable_space`]: `S ⇒ C` everywhere,
    /// and at least one `C ∧ ¬S` sequence exists. Returns the shortcuts.
    pub fn verify(&self) -> Result<Vec<Seq>, ToyError> {
        let space = self.reachable_space();
        if space.len() > 10_000 {
            return Err(ToyError::SpaceTooLarge(space.len()));
        }
        let class = self.class();
        let mut shortcuts = Vec::new();
        for seq in &space {
            let s = class.contains(seq);
            if s != self.semantic_check(seq) {
                return Err(ToyError::Malformed(self.id.clone()));
            }
            let c = surface_check(seq);
            if s && !c {
                return Err(ToyError::NotNecessary(render(seq)));
            }
            if c && !s {
                shortcuts.push(seq.clone());
            }
        }
        if shortcuts.is_empty() {
            return Err(ToyError::NoShortcut(self.id.clone()));
        }
        if surface_check(&self.initial_sequence) || !self.semantic_check(&self.gt_repair) {
            return Err(ToyError::Malformed(self.id.clone()));
        }
        Ok(shortcuts)
    }
}

fn hamming_ball(center: &[u8], radius: usize, out: &mut BTreeSet<Seq>) {
    hamming_ball_from(center, 0, radius, out);
}

fn hamming_ball_from(seq: &[u8], from: usize, radius: usize, out: &mut BTreeSet<Seq>) {
    out.insert(seq.to_vec());
    if radius == 0 {
        return;
    }
    for i in from..seq.len() {
        for s in 0..ALPHABET.len() as u8 {
            if s == seq[i] {
                continue;
            }
            let mut next = seq.to_vec();
            next[i] = s;
            hamming_ball_from(&next, i + 1, radius - 1, out);
        }
    }
}

/// Random balanced sequence of even length with 2 or more top-level groups
/// when the length allows it.
pub fn random_balanced<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Seq {
    assert!(len.is_multiple_of(2) && len >= 2, "length must be even and positive");
    let pairs = len / 2;
    // split pairs into top-level groups, then nest each group randomly
    let mut sizes = Vec::new();
    let mut left = pairs;
    while left > 0 {
        let max = if sizes.is_empty() && pairs > 1 {
            left - 1
        } else {
            left
        };
        let take = rng.random_range(1..=max);
        sizes.push(take);
        left -= take;
    }
    sizes.shuffle(rng);
    let mut out = Vec::with_capacity(len);
    for n in sizes {
        random_group(n, rng, &mut out);
    }
    out
}

/// One top-level group with `pairs` bracket pairs.
fn random_group<R: Rng + ?Sized>(pairs: usize, rng: &mut R, out: &mut Seq) {
    let k = rng.random_range(0..3u8);
    out.push(open_of(k));
    let mut inner = pairs - 1;
    while inner > 0 {
        let take = rng.random_range(1..=inner);
        random_group(take, rng, out);
        inner -= take;
    }
    out.push(close_of(k));
}

/// Generates a verified task: the target with one bracket's type changed.
pub fn generate_task<R: Rng + ?Sized>(id: impl Into<String>, len: usize, rng: &mut R) -> ToyTask {
    let id = id.into();
    loop {
        let gt = random_balanced(len, rng);
        let pos = rng.random_range(0..len);
        let old = kind(gt[pos]);
        let new = (old + rng.random_range(1..3u8)) % 3;
        let mut initial = gt.clone();
        initial[pos] = if is_open(gt[pos]) {
            open_of(new)
        } else {
            close_of(new)
        };
        let task = ToyTask {
            id: id.clone(),
            initial_sequence: initial,
            semantic_class: class_key(&gt),
            gt_repair: gt,
            surface_rule: SURFACE_RULE.to_string(),
        };
        if task.class().contains(&stub(len)) {
            continue;
        }
        if task.verify().is_ok() {
            return task;
        }
    }
}

/// Disjoint train and eval splits from one stream.
pub fn generate_splits<R: Rng + ?Sized>(
    num_train: usize,
    num_eval: usize,
    len: usize,
    rng: &mut R,
) -> (Vec<ToyTask>, Vec<ToyTask>) {
    let mut seen = BTreeSet::new();
    let mut all = Vec::with_capacity(num_train + num_eval);
    while all.len() < num_train + num_eval {
        let i = all.len();
        let id = if i < num_train {
            format!("train-{i:04}")
        } else {
            format!("eval-{:04}", i - num_train)
        };
        let task = generate_task(id, len, rng);
        if seen.insert((task.initial_sequence.clone(), task.gt_repair.clone())) {
            all.push(task);
        }
    }
    let eval = all.split_off(num_train);
    (all, eval)
}

pub fn write_tasks<W: Write>(out: W, tasks: &[ToyTask]) -> std::io::Result<()> {
    crate::trajectory::write_jsonl(out, tasks)
}

pub fn read_tasks<R: BufRead>(input: R) -> Result<Vec<ToyTask>, ToyError> {
    crate::trajectory::read_jsonl(input).map_err(|e| ToyError::TaskFile(e.to_string()))
}

impl fmt::Display for ToyTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} -> {}",
            self.id,
            render(&self.initial_sequence),
            render(&self.gt_repair)
        )
    }
}

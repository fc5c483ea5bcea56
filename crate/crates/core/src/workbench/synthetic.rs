//! Synthetic task families with a hidden one-bit operation choice.
//!
//! Every query admits two completions. Which one is correct is fixed by a cue rule;
//! the pretraining corpus shows both completions of every ambiguous form equally often,
//! so the frozen backbone cannot resolve the choice from the query alone.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::LmExample;
use crate::error::{Result, TflowError};
use crate::nn;
use crate::pipeline::RoleSet;
use crate::tokenizer::{tokenize, BOS, EOS};
use crate::training::DatasetRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Arith,
    Strop,
    Digit,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Arith, TaskKind::Strop, TaskKind::Digit];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Arith => "arith",
            TaskKind::Strop => "strop",
            TaskKind::Digit => "digit",
        }
    }

    /// Tags for the two branches, first branch first.
    pub fn ops(self) -> [&'static str; 2] {
        match self {
            TaskKind::Arith => ["add", "sub"],
            TaskKind::Strop => ["cpy", "rev"],
            TaskKind::Digit => ["succ", "pred"],
        }
    }
}

/// Where the deciding bit comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CueSource {
    /// The task's native rule: operand parity for arith, first-letter class for strop,
    /// a keyed hash for digit.
    #[default]
    Native,
    /// A keyed hash of the query string for every task.
    Hash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    pub cue: CueSource,
    pub n_train: usize,
    pub n_eval: usize,
    /// Distinct strop queries expanded into the pretraining corpus; arith and digit use
    /// their whole query universe.
    pub n_pretrain_queries: usize,
    /// Copies of this task's pretraining lines.
    pub pretrain_repeat: usize,
    /// Fraction of queries that also get the relay and double-tag forms.
    pub aux_fraction: f64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Arith,
            cue: CueSource::Native,
            n_train: 600,
            n_eval: 100,
            n_pretrain_queries: 1000,
            pretrain_repeat: 1,
            aux_fraction: 0.25,
        }
    }
}

impl SyntheticTaskSpec {
    /// Shipped defaults; arith facts are the hardest to memorise and get three copies.
    pub fn new(kind: TaskKind) -> Self {
        let pretrain_repeat = if kind == TaskKind::Arith { 3 } else { 1 };
        Self { kind, pretrain_repeat, ..Default::default() }
    }

    /// Branch index (0 or 1) selected by the cue rule; a total function of the query.
    pub fn branch(&self, query: &Query) -> usize {
        match (self.cue, query) {
            (CueSource::Native, Query::Arith { x, .. }) => (x % 2 != 0) as usize,
            (CueSource::Native, Query::Strop { s }) => (s.as_bytes()[0] > b'm') as usize,
            _ => keyed_bit(self.kind, &query.text()),
        }
    }

    pub fn description(&self) -> &'static str {
        match (self.cue, self.kind) {
            (CueSource::Native, TaskKind::Arith) => "even first operand -> add, odd -> sub",
            (CueSource::Native, TaskKind::Strop) => "first letter a-m -> copy, n-z -> reverse",
            _ => "keyed hash of the query string selects the branch",
        }
    }
}

fn keyed_bit(kind: TaskKind, text: &str) -> usize {
    let h = Sha256::digest(format!("cue/{}/{text}", kind.name()).as_bytes());
    (h[0] & 1) as usize
}

/// A deterministic number in `[0, 1)` derived from the query string.
fn keyed_unit(kind: TaskKind, text: &str) -> f64 {
    let h = Sha256::digest(format!("aux/{}/{text}", kind.name()).as_bytes());
    u32::from_le_bytes([h[0], h[1], h[2], h[3]]) as f64 / 4_294_967_296.0
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Query {
    Arith { x: u32, y: u32 },
    Strop { s: String },
    Digit { n: u32 },
}

impl Query {
    pub fn text(&self) -> String {
        match self {
            Query::Arith { x, y } => format!("{x}#{y}="),
            Query::Strop { s } => format!("{s}="),
            Query::Digit { n } => format!("{n}?"),
        }
    }

    /// Completion for branch `b`.
    pub fn answer(&self, b: usize) -> String {
        match (self, b) {
            (Query::Arith { x, y }, 0) => (x + y).to_string(),
            (Query::Arith { x, y }, _) => (x - y).to_string(),
            (Query::Strop { s }, 0) => s.clone(),
            (Query::Strop { s }, _) => s.chars().rev().collect(),
            (Query::Digit { n }, 0) => (n + 1).to_string(),
            (Query::Digit { n }, _) => (n - 1).to_string(),
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            Query::Arith { .. } => TaskKind::Arith,
            Query::Strop { .. } => TaskKind::Strop,
            Query::Digit { .. } => TaskKind::Digit,
        }
    }
}

/// Every arith query: `x#y=` with `x < 100`, `1 ≤ y ≤ min(9, x)`. `y = 0` is left out
/// because both branches would agree.
fn arith_universe() -> Vec<Query> {
    (1..100u32).flat_map(|x| (1..=9u32.min(x)).map(move |y| Query::Arith { x, y })).collect()
}

fn digit_universe() -> Vec<Query> {
    (1..999u32).map(|n| Query::Digit { n }).collect()
}

fn random_strop(rng: &mut nn::Rng) -> Query {
    loop {
        let len = rng.random_range(3..=5);
        let s: String = (0..len).map(|_| (b'a' + rng.random_range(0..26u8)) as char).collect();
        let rev: String = s.chars().rev().collect();
        if s != rev {
            return Query::Strop { s };
        }
    }
}

/// `n` distinct queries, sampled without replacement where a finite universe exists.
fn sample_queries(kind: TaskKind, n: usize, rng: &mut nn::Rng, exclude: &BTreeSet<String>) -> Result<Vec<Query>> {
    match kind {
        TaskKind::Arith | TaskKind::Digit => {
            let mut all = if kind == TaskKind::Arith { arith_universe() } else { digit_universe() };
            all.retain(|q| !exclude.contains(&q.text()));
            if all.len() < n {
                return Err(TflowError::Dataset(format!("{} has only {} queries, {n} requested", kind.name(), all.len())));
            }
            all.shuffle(rng);
            all.truncate(n);
            Ok(all)
        }
        TaskKind::Strop => {
            let mut seen = BTreeSet::new();
            let mut out = Vec::with_capacity(n);
            let mut attempts = 0;
            while out.len() < n {
                attempts += 1;
                if attempts > 100 * n + 1000 {
                    return Err(TflowError::Dataset("could not draw enough distinct strop queries".into()));
                }
                let q = random_strop(rng);
                let t = q.text();
                if !exclude.contains(&t) && seen.insert(t) {
                    out.push(q);
                }
            }
            Ok(out)
        }
    }
}

/// Disjoint train and eval record sets; eval queries are drawn first.
pub fn gen_records(spec: &SyntheticTaskSpec, seed: u64) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>)> {
    let mut rng = nn::seeded_rng(seed ^ 0x5EED_0000 ^ (spec.kind as u64) << 8);
    let eval_q = sample_queries(spec.kind, spec.n_eval, &mut rng, &BTreeSet::new())?;
    let held: BTreeSet<String> = eval_q.iter().map(Query::text).collect();
    let train_q = sample_queries(spec.kind, spec.n_train, &mut rng, &held)?;
    let to_rec = |q: &Query| {
        let b = spec.branch(q);
        DatasetRecord {
            query: q.text(),
            context: format!("op={}", spec.kind.ops()[b]),
            target: q.answer(b),
            source: spec.kind.name().to_string(),
        }
    };
    Ok((train_q.iter().map(to_rec).collect(), eval_q.iter().map(to_rec).collect()))
}

/// Pretraining forms for one query, both branches each. `aux` adds the double-tag and
/// sender relay forms.
fn query_forms(q: &Query, roles: &RoleSet, aux: bool) -> Vec<(String, String, String)> {
    let kind = q.kind();
    let qt = q.text();
    let recv = &roles.receiver.text;
    let mut out = Vec::new();
    for (b, op) in kind.ops().iter().enumerate() {
        let tag = format!("{op}:");
        let ans = q.answer(b);
        out.push(("tagged".into(), format!("{recv}{tag}{qt}"), ans.clone()));
        out.push(("plain".into(), format!("{recv}{qt}"), ans.clone()));
        if !aux {
            continue;
        }
        out.push(("tagged2".into(), format!("{recv}{tag}{tag}{qt}"), ans));
        for s in &roles.senders {
            out.push((format!("relay:{}", s.agent_id), format!("{}op={op} {qt}", s.text), tag.clone()));
        }
    }
    out
}

fn lm_example(prompt: &str, completion: &str) -> LmExample {
    let mut tokens = vec![BOS];
    tokens.extend(tokenize(prompt));
    let start = tokens.len();
    tokens.extend(tokenize(completion));
    tokens.push(EOS);
    let mask = (0..tokens.len()).map(|i| i >= start).collect();
    LmExample { tokens, mask }
}

/// A pretraining line in text form, kept for inspection and balance checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainLine {
    pub form: String,
    pub prompt: String,
    pub completion: String,
    pub source: String,
}

impl PretrainLine {
    pub fn example(&self) -> LmExample {
        lm_example(&self.prompt, &self.completion)
    }
}

/// Pretraining corpus for one task: every form of every sampled query with both
/// completions, repeated `pretrain_repeat` times.
pub fn gen_pretrain(spec: &SyntheticTaskSpec, roles: &RoleSet, seed: u64) -> Result<Vec<PretrainLine>> {
    let mut rng = nn::seeded_rng(seed ^ 0xC0_2905 ^ (spec.kind as u64) << 16);
    let queries = match spec.kind {
        TaskKind::Arith => arith_universe(),
        TaskKind::Digit => digit_universe(),
        TaskKind::Strop => sample_queries(TaskKind::Strop, spec.n_pretrain_queries, &mut rng, &BTreeSet::new())?,
    };
    let mut lines = Vec::new();
    for q in &queries {
        let aux = keyed_unit(spec.kind, &q.text()) < spec.aux_fraction;
        for (form, prompt, completion) in query_forms(q, roles, aux) {
            lines.push(PretrainLine { form, prompt, completion, source: spec.kind.name().into() });
        }
    }
    check_balance(spec.kind, &lines)?;
    let once = lines.clone();
    for _ in 1..spec.pretrain_repeat.max(1) {
        lines.extend(once.iter().cloned());
    }
    Ok(lines)
}

/// Each ambiguous prompt must appear with both branches equally often.
pub fn check_balance(kind: TaskKind, lines: &[PretrainLine]) -> Result<()> {
    let mut counts: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for l in lines.iter().filter(|l| l.form == "plain") {
        *counts.entry(l.prompt.as_str()).or_default().entry(l.completion.as_str()).or_default() += 1;
    }
    for (prompt, c) in counts {
        let distinct: BTreeSet<usize> = c.values().copied().collect();
        if c.len() != 2 || distinct.len() != 1 {
            return Err(TflowError::Dataset(format!("{}: branch imbalance for `{prompt}`: {c:?}", kind.name())));
        }
    }
    Ok(())
}

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::toolcall::{ToolCall, ToolCatalog};
use super::vocab::{Vocabulary, BOS, EOS, SEP};
use crate::error::{CitiError, Result};
use crate::numerics::{rng_for, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaskKind {
    Toolcall,
    Arith,
    Copy,
    Reverse,
    Recall,
}

impl TaskKind {
    /// The general-ability set.
    pub const GENERAL: [TaskKind; 4] = [TaskKind::Arith, TaskKind::Copy, TaskKind::Reverse, TaskKind::Recall];
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Toolcall,
        TaskKind::Arith,
        TaskKind::Copy,
        TaskKind::Reverse,
        TaskKind::Recall,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Toolcall => "TOOLCALL",
            TaskKind::Arith => "ARITH",
            TaskKind::Copy => "COPY",
            TaskKind::Reverse => "REVERSE",
            TaskKind::Recall => "RECALL",
        }
    }

    fn role_marker(self) -> &'static str {
        match self {
            TaskKind::Toolcall => "<tool>",
            TaskKind::Arith => "<arith>",
            TaskKind::Copy => "<copy>",
            TaskKind::Reverse => "<rev>",
            TaskKind::Recall => "<recall>",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = CitiError;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| CitiError::contract(format!("unknown task kind {s}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticExample {
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
    pub task: TaskKind,
    pub is_tool: bool,
}

impl SyntheticExample {
    /// Target without the trailing EOS.
    pub fn answer(&self) -> &[usize] {
        &self.target[..self.target.len() - 1]
    }
}

/// Largest ARITH operand.
pub const ARITH_MAX: u32 = 49;
pub const RECALL_KEYS: usize = 48;
const WORD_LEN: std::ops::RangeInclusive<usize> = 3..=10;

/// The fixed key → value table behind RECALL. Keys are three letters and
/// values two digits.
pub fn recall_table() -> &'static [(String, String)] {
    static TABLE: OnceLock<Vec<(String, String)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut rng = rng_for(0x5eed_7ab1e, "recall-table");
        let mut keys = std::collections::BTreeSet::new();
        let mut table = Vec::new();
        while table.len() < RECALL_KEYS {
            let key: String = (0..3).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
            if !keys.insert(key.clone()) {
                continue;
            }
            let value = format!("{}{}", rng.gen_range(0..10), rng.gen_range(0..10));
            table.push((key, value));
        }
        table
    })
}

fn random_word(rng: &mut Rng) -> String {
    let len = rng.gen_range(WORD_LEN);
    (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
}

fn example(task: TaskKind, prompt_body: &str, answer: &str) -> SyntheticExample {
    let v = Vocabulary::standard();
    let mut prompt = vec![BOS, v.id(task.role_marker()).unwrap()];
    prompt.extend(v.encode(prompt_body).unwrap());
    if task != TaskKind::Arith {
        prompt.push(SEP);
    }
    let mut target = v.encode(answer).unwrap();
    target.push(EOS);
    SyntheticExample {
        prompt,
        target,
        task,
        is_tool: task == TaskKind::Toolcall,
    }
}

/// Renders a tool request: the api name with each argument bound to its
/// value. `add(a:3,b:5)` asks for `CALL add(a=3,b=5)`.
pub fn tool_example(call: &ToolCall) -> SyntheticExample {
    let args: Vec<String> = call.args.iter().map(|(k, v)| format!("{k}:{v}")).collect();
    let body = format!("{}({})", call.name, args.join(","));
    example(TaskKind::Toolcall, &body, &call.to_string())
}

fn one(task: TaskKind, rng: &mut Rng, catalog: &ToolCatalog) -> SyntheticExample {
    match task {
        TaskKind::Arith => {
            let a = rng.gen_range(0..=ARITH_MAX);
            let b = rng.gen_range(0..=ARITH_MAX);
            example(task, &format!("{a}+{b}="), &(a + b).to_string())
        }
        TaskKind::Copy => {
            let w = random_word(rng);
            example(task, &w, &w)
        }
        TaskKind::Reverse => {
            let w = random_word(rng);
            let r: String = w.chars().rev().collect();
            example(task, &w, &r)
        }
        TaskKind::Recall => {
            let (k, v) = &recall_table()[rng.gen_range(0..RECALL_KEYS)];
            example(task, k, v)
        }
        TaskKind::Toolcall => {
            let api = &catalog.apis[rng.gen_range(0..catalog.apis.len())];
            let args = api
                .args
                .iter()
                .map(|(name, alphabet)| {
                    let syms = alphabet.symbols();
                    (name.clone(), syms[rng.gen_range(0..syms.len())].to_string())
                })
                .collect();
            tool_example(&ToolCall {
                name: api.name.clone(),
                args,
            })
        }
    }
}

/// `n` examples of `task`, a pure function of `(task, n, seed)`.
pub fn generate_dataset(task: TaskKind, n: usize, seed: u64) -> Result<Vec<SyntheticExample>> {
    if n < 1 {
        return Err(CitiError::contract("dataset size must be at least 1"));
    }
    let catalog = ToolCatalog::standard();
    let mut rng = rng_for(seed, &format!("dataset/{task}"));
    Ok((0..n).map(|_| one(task, &mut rng, &catalog)).collect())
}

/// Truncation point for a probe input: uniform in `[0, target_len − 1]`.
pub fn probe_cut(target_len: usize, seed: u64) -> Result<usize> {
    if target_len == 0 {
        return Err(CitiError::contract("probe input needs a non-empty target"));
    }
    Ok(rng_for(seed, "probe-cut").gen_range(0..target_len))
}

/// `prompt ++ target[..k]` with a seeded uniform `k < |target|`, so the
/// input never contains a finished answer.
pub fn make_probe_input(example: &SyntheticExample, seed: u64) -> Result<Vec<usize>> {
    let k = probe_cut(example.target.len(), seed)?;
    let mut out = example.prompt.clone();
    out.extend_from_slice(&example.target[..k]);
    Ok(out)
}

/// Interleaves `total` examples drawn from the tool set and the general sets
/// in proportion to `ratios`. Counts use largest-remainder rounding; a source
/// is taken in shuffled order and cycled only if it is too small.
pub fn mix_datasets(
    tool: &[SyntheticExample],
    general: &BTreeMap<TaskKind, Vec<SyntheticExample>>,
    ratios: &BTreeMap<TaskKind, f64>,
    total: usize,
    seed: u64,
) -> Result<Vec<SyntheticExample>> {
    if ratios.values().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(CitiError::contract("mix ratios must be non-negative"));
    }
    let sum: f64 = ratios.values().sum();
    if sum <= 0.0 {
        return Err(CitiError::contract("mix ratios sum to zero"));
    }
    let source = |k: TaskKind| -> &[SyntheticExample] {
        if k == TaskKind::Toolcall {
            tool
        } else {
            general.get(&k).map(|v| v.as_slice()).unwrap_or(&[])
        }
    };
    let kinds: Vec<(TaskKind, f64)> = ratios.iter().filter(|(_, r)| **r > 0.0).map(|(k, r)| (*k, *r)).collect();
    let exact: Vec<f64> = kinds.iter().map(|(_, r)| r / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..kinds.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let short = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    let mut rng = rng_for(seed, "mix");
    let mut out = Vec::with_capacity(total);
    for ((kind, _), count) in kinds.iter().zip(counts) {
        let src = source(*kind);
        if src.is_empty() {
            return Err(CitiError::contract(format!("no {kind} examples for a positive mix ratio")));
        }
        let mut taken = 0;
        while taken < count {
            let mut idx: Vec<usize> = (0..src.len()).collect();
            idx.shuffle(&mut rng);
            for i in idx.into_iter().take(count - taken) {
                out.push(src[i].clone());
                taken += 1;
            }
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Recall keys whose value appears in the same example of `corpus`.
pub fn recall_leaks(corpus: &[SyntheticExample]) -> Vec<String> {
    let v = Vocabulary::standard();
    let table: Vec<(Vec<usize>, Vec<usize>)> = recall_table()
        .iter()
        .map(|(k, val)| (v.encode(k).unwrap(), v.encode(val).unwrap()))
        .collect();
    let contains = |hay: &[usize], needle: &[usize]| hay.windows(needle.len()).any(|w| w == needle);
    let mut leaks = Vec::new();
    for ex in corpus {
        let mut text = ex.prompt.clone();
        text.extend_from_slice(&ex.target);
        for ((k, val), (name, _)) in table.iter().zip(recall_table()) {
            if contains(&text, k) && contains(&text, val) {
                leaks.push(name.clone());
            }
        }
    }
    leaks.sort();
    leaks.dedup();
    leaks
}

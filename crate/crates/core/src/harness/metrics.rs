//! Tool-call correctness, the error taxonomy, ROUGE-L and exact-match accuracy.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CitiError, Result};
pub use crate::importance::Accuracies;
use crate::model::Model;
use crate::numerics::Float;
use crate::parallel::map_ordered;
use crate::tasks::{parse_call_prefix, parse_tool_call, ParseFailure, SyntheticExample, TaskKind, ToolCall, EOS};

/// Generation budget per prompt.
pub const MAX_NEW_TOKENS: usize = 64;
const DECODE_CHUNK: usize = 64;

/// Anything that maps prompts to generated continuations (stop token excluded).
pub trait Decoder: Sync {
    fn decode(&self, prompts: &[Vec<usize>]) -> Result<Vec<Vec<usize>>>;
}

impl<T: Float> Decoder for Model<T> {
    fn decode(&self, prompts: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
        self.greedy_decode_batch(prompts, MAX_NEW_TOKENS, EOS)
    }
}

/// Per-prompt decoder built from a closure; used for oracle and fixture stubs.
pub struct FnDecoder<F>(pub F);

impl<F: Fn(&[usize]) -> Vec<usize> + Sync> Decoder for FnDecoder<F> {
    fn decode(&self, prompts: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
        Ok(prompts.iter().map(|p| (self.0)(p)).collect())
    }
}

/// Decodes in fixed chunks spread over `workers` threads; output order follows input.
pub fn decode_all<D: Decoder + ?Sized>(decoder: &D, prompts: &[Vec<usize>], workers: usize) -> Result<Vec<Vec<usize>>> {
    let chunks: Vec<&[Vec<usize>]> = prompts.chunks(DECODE_CHUNK).collect();
    let parts = map_ordered(&chunks, workers, |c| decoder.decode(c))?;
    Ok(parts.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorKind {
    NoApiCall,
    ApiNameMismatch,
    InputMismatch,
    OutputMismatch,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 4] = [
        ErrorKind::NoApiCall,
        ErrorKind::ApiNameMismatch,
        ErrorKind::InputMismatch,
        ErrorKind::OutputMismatch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::NoApiCall => "NO_API_CALL",
            ErrorKind::ApiNameMismatch => "API_NAME_MISMATCH",
            ErrorKind::InputMismatch => "INPUT_MISMATCH",
            ErrorKind::OutputMismatch => "OUTPUT_MISMATCH",
        }
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub no_api_call: usize,
    pub api_name_mismatch: usize,
    pub input_mismatch: usize,
    pub output_mismatch: usize,
}

impl Taxonomy {
    pub fn record(&mut self, kind: ErrorKind) {
        match kind {
            ErrorKind::NoApiCall => self.no_api_call += 1,
            ErrorKind::ApiNameMismatch => self.api_name_mismatch += 1,
            ErrorKind::InputMismatch => self.input_mismatch += 1,
            ErrorKind::OutputMismatch => self.output_mismatch += 1,
        }
    }

    pub fn as_tuple(&self) -> (usize, usize, usize, usize) {
        (self.no_api_call, self.api_name_mismatch, self.input_mismatch, self.output_mismatch)
    }

    pub fn total(&self) -> usize {
        self.no_api_call + self.api_name_mismatch + self.input_mismatch + self.output_mismatch
    }
}

/// `None` when `output` is exactly a call matching `gold` (argument order free).
pub fn classify_tool_output(output: &[usize], gold: &ToolCall) -> Option<ErrorKind> {
    match parse_call_prefix(output) {
        Err(ParseFailure::NoCallToken) => Some(ErrorKind::NoApiCall),
        Err(ParseFailure::NameMalformed) => Some(ErrorKind::ApiNameMismatch),
        Err(ParseFailure::ArgsMalformed) => Some(ErrorKind::InputMismatch),
        Ok((call, used)) => {
            if call.name != gold.name {
                Some(ErrorKind::ApiNameMismatch)
            } else if !call.same_args(gold) {
                Some(ErrorKind::InputMismatch)
            } else if used != output.len() {
                Some(ErrorKind::OutputMismatch)
            } else {
                None
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolEval {
    pub n: usize,
    pub correct: usize,
    /// Parse-match correctness C.
    pub correctness: f64,
    /// Mean ROUGE-L F of outputs against gold responses.
    pub rouge_l: f64,
    pub taxonomy: Taxonomy,
}

fn gold_call(e: &SyntheticExample) -> Result<ToolCall> {
    if !e.is_tool {
        return Err(CitiError::contract(format!("tool evaluation got a {} example", e.task)));
    }
    parse_tool_call(e.answer()).map_err(|f| CitiError::contract(format!("unparseable gold call: {f:?}")))
}

/// Scores a TOOLCALL test set.
pub fn evaluate_toolcalls<D: Decoder + ?Sized>(decoder: &D, testset: &[SyntheticExample], workers: usize) -> Result<ToolEval> {
    if testset.is_empty() {
        return Err(CitiError::contract("empty tool test set"));
    }
    let golds: Vec<ToolCall> = testset.iter().map(gold_call).collect::<Result<_>>()?;
    let prompts: Vec<Vec<usize>> = testset.iter().map(|e| e.prompt.clone()).collect();
    let outputs = decode_all(decoder, &prompts, workers)?;
    let mut taxonomy = Taxonomy::default();
    let mut rouge = 0.0;
    for ((out, gold), e) in outputs.iter().zip(&golds).zip(testset) {
        if let Some(kind) = classify_tool_output(out, gold) {
            taxonomy.record(kind);
        }
        rouge += rouge_l(out, e.answer())?;
    }
    let n = testset.len();
    let correct = n - taxonomy.total();
    Ok(ToolEval {
        n,
        correct,
        correctness: correct as f64 / n as f64,
        rouge_l: rouge / n as f64,
        taxonomy,
    })
}

/// Longest common subsequence length.
pub fn lcs_len<A: PartialEq>(a: &[A], b: &[A]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure of `candidate` against `reference`.
pub fn rouge_l<A: PartialEq>(candidate: &[A], reference: &[A]) -> Result<f64> {
    if reference.is_empty() {
        return Err(CitiError::contract("ROUGE-L against an empty reference"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Exact-match accuracy of greedy outputs per task.
pub fn evaluate_general<D: Decoder + ?Sized>(
    decoder: &D,
    testsets: &BTreeMap<TaskKind, Vec<SyntheticExample>>,
    workers: usize,
) -> Result<Accuracies> {
    let mut out = Accuracies::new();
    for (task, set) in testsets {
        if set.is_empty() {
            return Err(CitiError::contract(format!("empty {task} test set")));
        }
        let prompts: Vec<Vec<usize>> = set.iter().map(|e| e.prompt.clone()).collect();
        let outputs = decode_all(decoder, &prompts, workers)?;
        let hits = outputs.iter().zip(set).filter(|(o, e)| o.as_slice() == e.answer()).count();
        out.insert(task.as_str().to_string(), hits as f64 / set.len() as f64);
    }
    Ok(out)
}

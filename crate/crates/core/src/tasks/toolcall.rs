//! The tool-call grammar: `CALL name(arg=value,…)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, CALL};
use crate::error::{CitiError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueAlphabet {
    Letters,
    Digits,
}

impl ValueAlphabet {
    pub fn symbols(self) -> Vec<char> {
        match self {
            ValueAlphabet::Letters => ('a'..='z').collect(),
            ValueAlphabet::Digits => ('0'..='9').collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiSpec {
    pub name: String,
    pub args: Vec<(String, ValueAlphabet)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCatalog {
    pub apis: Vec<ApiSpec>,
}

impl ToolCatalog {
    pub fn standard() -> Self {
        use ValueAlphabet::{Digits as D, Letters as L};
        let api = |name: &str, args: &[(&str, ValueAlphabet)]| ApiSpec {
            name: name.into(),
            args: args.iter().map(|(a, v)| (a.to_string(), *v)).collect(),
        };
        Self {
            apis: vec![
                api("wx", &[("c", L)]),
                api("tm", &[("z", L), ("h", D)]),
                api("sq", &[("n", D)]),
                api("add", &[("a", D), ("b", D)]),
                api("mv", &[("f", L), ("t", L)]),
                api("bk", &[("d", D), ("h", D), ("r", L)]),
                api("pay", &[("u", L), ("m", D)]),
                api("srt", &[("k", L), ("o", D), ("l", D)]),
                api("ev", &[("t", L)]),
                api("geo", &[("x", D), ("y", D)]),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.apis.len() < 8 {
            return Err(CitiError::contract("a tool catalog needs at least 8 apis"));
        }
        let mut names: Vec<&str> = self.apis.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.apis.len() {
            return Err(CitiError::contract("tool names must be unique"));
        }
        if self.apis.iter().any(|a| a.args.is_empty() || a.args.len() > 3) {
            return Err(CitiError::contract("every api takes 1 to 3 arguments"));
        }
        Ok(())
    }
}

/// A parsed call. Argument order is kept as written.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    pub args: Vec<(String, String)>,
}

impl fmt::Display for ToolCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CALL {}(", self.name)?;
        for (i, (k, v)) in self.args.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{k}={v}")?;
        }
        f.write_str(")")
    }
}

impl ToolCall {
    pub fn render(&self) -> Vec<usize> {
        Vocabulary::standard()
            .encode(&self.to_string())
            .expect("calls are built from vocabulary symbols")
    }

    /// Argument multiset equality (order-insensitive).
    pub fn same_args(&self, other: &ToolCall) -> bool {
        let mut a = self.args.clone();
        let mut b = other.args.clone();
        a.sort();
        b.sort();
        a == b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ParseFailure {
    NoCallToken,
    NameMalformed,
    ArgsMalformed,
}

struct Cursor<'a> {
    toks: &'a [usize],
    pos: usize,
    vocab: &'a Vocabulary,
}

impl Cursor<'_> {
    fn peek(&self) -> Option<usize> {
        self.toks.get(self.pos).copied()
    }

    fn eat(&mut self, sym: &str) -> bool {
        match self.peek() {
            Some(t) if self.vocab.symbol(t) == Some(sym) => {
                self.pos += 1;
                true
            }
            _ => false,
        }
    }

    fn word(&mut self, accept: impl Fn(usize) -> bool) -> Option<String> {
        let start = self.pos;
        while self.peek().map(&accept).unwrap_or(false) {
            self.pos += 1;
        }
        (self.pos > start).then(|| {
            self.toks[start..self.pos]
                .iter()
                .map(|&t| self.vocab.symbol(t).unwrap())
                .collect()
        })
    }
}

/// Parses a call at the start of `tokens`, returning it and the number of
/// tokens consumed. Trailing tokens are left for the caller.
pub fn parse_call_prefix(tokens: &[usize]) -> std::result::Result<(ToolCall, usize), ParseFailure> {
    let vocab = Vocabulary::standard();
    if tokens.first() != Some(&CALL) {
        return Err(ParseFailure::NoCallToken);
    }
    let mut c = Cursor { toks: tokens, pos: 1, vocab };
    let name = c.word(|t| vocab.is_letter(t)).ok_or(ParseFailure::NameMalformed)?;
    if !c.eat("(") {
        return Err(ParseFailure::NameMalformed);
    }
    let mut args = Vec::new();
    loop {
        let key = c.word(|t| vocab.is_letter(t)).ok_or(ParseFailure::ArgsMalformed)?;
        if !c.eat("=") {
            return Err(ParseFailure::ArgsMalformed);
        }
        let value = c
            .word(|t| vocab.is_letter(t) || vocab.is_digit(t))
            .ok_or(ParseFailure::ArgsMalformed)?;
        args.push((key, value));
        if c.eat(")") {
            break;
        }
        if !c.eat(",") {
            return Err(ParseFailure::ArgsMalformed);
        }
    }
    Ok((ToolCall { name, args }, c.pos))
}

/// Parses a complete call; anything after the closing parenthesis is an
/// argument-list error.
pub fn parse_tool_call(tokens: &[usize]) -> std::result::Result<ToolCall, ParseFailure> {
    let (call, used) = parse_call_prefix(tokens)?;
    if used != tokens.len() {
        return Err(ParseFailure::ArgsMalformed);
    }
    Ok(call)
}

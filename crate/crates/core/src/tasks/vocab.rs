use std::collections::HashMap;
use std::sync::OnceLock;

use crate::error::{CitiError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const CALL: usize = 3;
pub const SEP: usize = 4;

const SPECIALS: [&str; 5] = ["<PAD>", "<BOS>", "<EOS>", "CALL", "<SEP>"];
const ROLES: [&str; 5] = ["<arith>", "<copy>", "<rev>", "<recall>", "<tool>"];
const OPERATORS: [char; 7] = ['+', '-', '=', ',', '(', ')', ':'];

/// Fixed symbol table: specials, task role markers, digits, lowercase
/// letters and a handful of operators. Id 0 is padding.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn standard() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(|| {
            let mut symbols: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
            symbols.extend(ROLES.iter().map(|s| s.to_string()));
            symbols.extend(('0'..='9').map(String::from));
            symbols.extend(('a'..='z').map(String::from));
            symbols.extend(OPERATORS.iter().map(|c| c.to_string()));
            let index = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
            Vocabulary { symbols, index }
        })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Result<usize> {
        self.index
            .get(symbol)
            .copied()
            .ok_or_else(|| CitiError::contract(format!("symbol {symbol:?} not in vocabulary")))
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(|s| s.as_str())
    }

    pub fn char_id(&self, c: char) -> Result<usize> {
        self.id(c.encode_utf8(&mut [0; 4]))
    }

    /// Tokenizes text: `<...>` markers and `CALL` are single tokens, spaces are
    /// ignored, every other character is its own token.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let mut rest = text;
        while let Some(c) = rest.chars().next() {
            if c.is_whitespace() {
                rest = &rest[c.len_utf8()..];
            } else if let Some(tail) = rest.strip_prefix("CALL") {
                out.push(CALL);
                rest = tail;
            } else if c == '<' {
                let end = rest
                    .find('>')
                    .ok_or_else(|| CitiError::contract(format!("unterminated marker in {text:?}")))?;
                out.push(self.id(&rest[..=end])?);
                rest = &rest[end + 1..];
            } else {
                out.push(self.char_id(c)?);
                rest = &rest[c.len_utf8()..];
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        for &id in ids {
            match self.symbol(id) {
                Some("CALL") => s.push_str("CALL "),
                Some(sym) => s.push_str(sym),
                None => s.push('?'),
            }
        }
        s
    }

    pub fn is_letter(&self, id: usize) -> bool {
        self.symbol(id)
            .map(|s| s.len() == 1 && s.as_bytes()[0].is_ascii_lowercase())
            .unwrap_or(false)
    }

    pub fn is_digit(&self, id: usize) -> bool {
        self.symbol(id)
            .map(|s| s.len() == 1 && s.as_bytes()[0].is_ascii_digit())
            .unwrap_or(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bijective_with_pad_zero() {
        let v = Vocabulary::standard();
        assert_eq!(v.symbol(PAD), Some("<PAD>"));
        for id in 0..v.len() {
            assert_eq!(v.id(v.symbol(id).unwrap()).unwrap(), id);
        }
        assert_eq!(v.len(), 53);
    }

    #[test]
    fn encode_decode() {
        let v = Vocabulary::standard();
        let ids = v.encode("CALL wx(c=p)").unwrap();
        assert_eq!(ids[0], CALL);
        assert_eq!(ids.len(), 8);
        assert_eq!(v.decode(&ids), "CALL wx(c=p)");
        assert_eq!(v.encode("<BOS><arith>12+7=").unwrap().len(), 7);
        assert!(v.encode("A").is_err());
    }
}

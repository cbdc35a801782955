use std::collections::HashMap;
use std::fs;
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const NUM_SPECIAL: usize = 5;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Prefix marking a word-initial subword.
pub const WORD_START: char = '\u{2581}';

/// NFC plus whitespace collapsing: the form `decode(encode(x))` returns.
pub fn normalize(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Token/id bijection. Ids 0..5 are the special tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    longest: usize,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() <= NUM_SPECIAL {
            return Err(Error::InvalidArgument(format!(
                "vocabulary needs at least {} tokens, got {}",
                NUM_SPECIAL + 1,
                tokens.len()
            )));
        }
        for (id, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[id] != *special {
                return Err(Error::InvalidArgument(format!(
                    "token {id} must be {special}, found {:?}",
                    tokens[id]
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("invalid token {tok:?} at id {id}")));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token {tok:?} at id {id}")));
            }
        }
        let longest = tokens.iter().map(|t| t.chars().count()).max().unwrap_or(1);
        Ok(Vocab { tokens, index, longest })
    }

    /// One token per line; the line number (from 0) is the id.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens = text.lines().map(str::to_owned).collect();
        Self::from_tokens(tokens).map_err(|e| Error::parse(path, 0, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIAL
    }

    /// Subword ids for `text` without CLS/SEP.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let nfc: String = text.nfc().collect();
        let mut ids = Vec::new();
        for word in nfc.split_whitespace() {
            self.tokenize_word(word, &mut ids);
        }
        ids
    }

    /// Greedy longest-prefix segmentation of one whitespace-free word.
    pub(crate) fn tokenize_word(&self, word: &str, out: &mut Vec<usize>) {
        let chars: Vec<char> = std::iter::once(WORD_START).chain(word.chars()).collect();
        let mut buf = String::new();
        let mut i = 0;
        while i < chars.len() {
            // The marker never stands alone: the first piece spans at least two chars.
            let min_end = if i == 0 { 2 } else { i + 1 };
            let max_end = chars.len().min(i + self.longest);
            let mut matched = None;
            for end in (min_end..=max_end).rev() {
                buf.clear();
                buf.extend(&chars[i..end]);
                if let Some(id) = self.id(&buf) {
                    matched = Some((id, end));
                    break;
                }
            }
            let (id, end) = matched.unwrap_or((UNK, min_end));
            out.push(id);
            i = end;
        }
    }

    /// Inverse of [`tokenize`](Self::tokenize) for in-vocabulary text; special ids are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut text = String::new();
        for &id in ids {
            if matches!(id, PAD | CLS | SEP) {
                continue;
            }
            let tok = self.token(id).unwrap_or(SPECIAL_TOKENS[UNK]);
            match tok.strip_prefix(WORD_START) {
                Some(rest) => {
                    if !text.is_empty() {
                        text.push(' ');
                    }
                    text.push_str(rest);
                }
                None => text.push_str(tok),
            }
        }
        text
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Vocab {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        for t in ["▁a", "▁b", "a", "b", "▁ab", "ab", "▁abab"] {
            tokens.push(t.to_string());
        }
        Vocab::from_tokens(tokens).unwrap()
    }

    #[test]
    fn greedy_longest_prefix() {
        let v = toy();
        let ids = v.tokenize("abab abb ba");
        let toks: Vec<&str> = ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(toks, ["▁abab", "▁ab", "b", "▁b", "a"]);
        assert_eq!(v.decode(&ids), "abab abb ba");
    }

    #[test]
    fn unknown_characters_become_unk() {
        let v = toy();
        assert_eq!(v.tokenize("ac"), vec![v.id("▁a").unwrap(), UNK]);
        assert_eq!(v.tokenize("c"), vec![UNK]);
    }

    #[test]
    fn rejects_bad_vocabularies() {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        assert!(Vocab::from_tokens(tokens.clone()).is_err());
        tokens.push("x".into());
        tokens.push("x".into());
        assert!(Vocab::from_tokens(tokens.clone()).is_err());
        tokens.pop();
        tokens.swap(0, 1);
        assert!(Vocab::from_tokens(tokens).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let v = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
    }

    #[test]
    fn normalize_collapses_whitespace() {
        assert_eq!(normalize("  a \t b\n"), "a b");
        assert_eq!(normalize("\u{03B1}\u{0301}"), "\u{03AC}");
    }
}

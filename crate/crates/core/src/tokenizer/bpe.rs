use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

use super::vocab::{Vocab, NUM_SPECIAL, SPECIAL_TOKENS, WORD_START};

/// Trains a BPE vocabulary over whitespace-split words of the given files.
pub fn train_vocab<P: AsRef<Path>>(corpora: &[P], size: usize) -> Result<Vocab> {
    let mut texts = Vec::with_capacity(corpora.len());
    for path in corpora {
        let path = path.as_ref();
        texts.push(std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?);
    }
    train_vocab_from_lines(texts.iter().flat_map(|t| t.lines()), size)
}

/// Byte-pair merging over words, most frequent pair first.
///
/// The base alphabet is every character observed in the corpus, with the
/// word-initial marker fused onto the first character of each word. Ties in
/// pair frequency go to the lexicographically smallest pair, so the result is
/// a pure function of the corpus. Training stops early when no pair is left.
pub fn train_vocab_from_lines<'a>(lines: impl IntoIterator<Item = &'a str>, size: usize) -> Result<Vocab> {
    if size <= NUM_SPECIAL {
        return Err(Error::InvalidArgument(format!(
            "vocabulary size {size} leaves no room beyond the {NUM_SPECIAL} special tokens"
        )));
    }

    let mut word_counts: HashMap<String, usize> = HashMap::new();
    for line in lines {
        let nfc: String = line.nfc().collect();
        for word in nfc.split_whitespace() {
            *word_counts.entry(word.to_owned()).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::Empty("vocabulary corpus has no words".into()));
    }

    let mut words: Vec<(Vec<String>, usize)> = word_counts
        .into_iter()
        .map(|(word, count)| {
            let mut chars = word.chars();
            let first = chars.next().expect("split_whitespace yields non-empty words");
            let mut symbols = vec![format!("{WORD_START}{first}")];
            symbols.extend(chars.map(String::from));
            (symbols, count)
        })
        .collect();
    words.sort();

    let alphabet: BTreeSet<&String> = words.iter().flat_map(|(s, _)| s.iter()).collect();
    if NUM_SPECIAL + alphabet.len() > size {
        return Err(Error::InvalidArgument(format!(
            "vocabulary size {size} cannot hold the {} special tokens and {} base symbols",
            NUM_SPECIAL,
            alphabet.len()
        )));
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet.into_iter().cloned());
    let mut known: BTreeSet<String> = tokens.iter().cloned().collect();

    while tokens.len() < size {
        let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (symbols, count) in &words {
            for w in symbols.windows(2) {
                *pairs.entry((&w[0], &w[1])).or_default() += count;
            }
        }
        // max count, then smallest pair
        let Some(((left, right), _)) =
            pairs
                .into_iter()
                .fold(None, |best: Option<((&str, &str), usize)>, (pair, count)| match best {
                    Some((_, c)) if c >= count => best,
                    _ => Some((pair, count)),
                })
        else {
            break;
        };
        let (left, right) = (left.to_owned(), right.to_owned());
        let merged = format!("{left}{right}");
        for (symbols, _) in &mut words {
            apply_merge(symbols, &left, &right, &merged);
        }
        if known.insert(merged.clone()) {
            tokens.push(merged);
        }
    }

    Vocab::from_tokens(tokens)
}

fn apply_merge(symbols: &mut Vec<String>, left: &str, right: &str, merged: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            symbols[i] = merged.to_owned();
            symbols.remove(i + 1);
        }
        i += 1;
    }
}

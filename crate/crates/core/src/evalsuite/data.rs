use std::path::Path;

use crate::error::{Error, Result};
use crate::textio::read_lines;

/// One classification example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledText {
    pub label: String,
    pub text: String,
}

/// One tagging example: parallel word and tag lists.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TaggedSentence {
    pub words: Vec<String>,
    pub tags: Vec<String>,
}

/// Parses `label<TAB>text` lines; blank lines are skipped.
pub fn parse_labeled<S: AsRef<str>>(lines: &[S], origin: &Path) -> Result<Vec<LabeledText>> {
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        let line = line.as_ref();
        if line.trim().is_empty() {
            continue;
        }
        match line.split_once('\t') {
            Some((label, text)) if !label.is_empty() && !text.contains('\t') => out.push(LabeledText {
                label: label.to_string(),
                text: text.to_string(),
            }),
            _ => return Err(Error::parse(origin, i + 1, "expected label<TAB>text")),
        }
    }
    Ok(out)
}

pub fn load_labeled(path: impl AsRef<Path>) -> Result<Vec<LabeledText>> {
    let path = path.as_ref();
    parse_labeled(&read_lines(path)?, path)
}

/// Parses `word<TAB>tag` lines with blank lines between sentences.
pub fn parse_tagged<S: AsRef<str>>(lines: &[S], origin: &Path) -> Result<Vec<TaggedSentence>> {
    let mut out = Vec::new();
    let mut cur = TaggedSentence::default();
    for (i, line) in lines.iter().enumerate() {
        let line = line.as_ref();
        if line.trim().is_empty() {
            if !cur.words.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            continue;
        }
        match line.split_once('\t') {
            Some((word, tag)) if !word.is_empty() && !tag.is_empty() && !tag.contains('\t') => {
                cur.words.push(word.to_string());
                cur.tags.push(tag.to_string());
            }
            _ => return Err(Error::parse(origin, i + 1, "expected word<TAB>tag")),
        }
    }
    if !cur.words.is_empty() {
        out.push(cur);
    }
    Ok(out)
}

pub fn load_tagged(path: impl AsRef<Path>) -> Result<Vec<TaggedSentence>> {
    let path = path.as_ref();
    parse_tagged(&read_lines(path)?, path)
}

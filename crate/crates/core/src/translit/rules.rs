use std::collections::HashMap;
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

use super::is_passthrough;

/// Characters a rule target may contain.
pub fn is_output_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, ' ' | '\'' | '-')
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rule {
    source: Vec<char>,
    target: String,
}

impl Rule {
    /// Builds a rule, NFC-normalizing the source.
    pub fn new(source: &str, target: &str) -> Result<Self> {
        let source: Vec<char> = source.nfc().collect();
        let Some(&first) = source.first() else {
            return Err(Error::InvalidArgument("rule source is empty".into()));
        };
        if is_passthrough(first) {
            return Err(Error::InvalidArgument(format!(
                "rule source {first:?} starts with a character that already passes through"
            )));
        }
        if let Some(bad) = target.chars().find(|&c| !is_output_char(c)) {
            return Err(Error::InvalidArgument(format!(
                "rule target {target:?} contains non-Latin character {bad:?}"
            )));
        }
        Ok(Rule {
            source,
            target: target.to_owned(),
        })
    }

    pub fn source(&self) -> &[char] {
        &self.source
    }

    pub fn target(&self) -> &str {
        &self.target
    }

    /// Match priority: longer sources win.
    pub fn priority(&self) -> usize {
        self.source.len()
    }
}

/// Immutable rewrite table indexed by the first code point of each source.
#[derive(Clone, Debug, Default)]
pub struct RuleTable {
    by_first: HashMap<char, Vec<Rule>>,
    len: usize,
}

const BUILTIN: &[(&str, &str)] = &[
    ("grek", include_str!("../../rules/grek.tsv")),
    ("hebr", include_str!("../../rules/hebr.tsv")),
    ("arab", include_str!("../../rules/arab.tsv")),
    ("cipher", include_str!("../../rules/cipher.tsv")),
];

impl RuleTable {
    pub fn from_rules(rules: impl IntoIterator<Item = Rule>) -> Result<Self> {
        let mut table = RuleTable::default();
        for rule in rules {
            table.insert(rule).map_err(Error::InvalidArgument)?;
        }
        Ok(table)
    }

    fn insert(&mut self, rule: Rule) -> std::result::Result<(), String> {
        let bucket = self.by_first.entry(rule.source[0]).or_default();
        if bucket.iter().any(|r| r.source == rule.source) {
            let source: String = rule.source.iter().collect();
            return Err(format!("duplicate rule source {source:?}"));
        }
        // Descending source length; stable for equal lengths.
        let at = bucket.partition_point(|r| r.priority() >= rule.priority());
        bucket.insert(at, rule);
        self.len += 1;
        Ok(())
    }

    /// Parses `source<TAB>target` lines; `#` lines and blank lines are skipped.
    /// `origin` only labels error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut table = RuleTable::default();
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 2 {
                return Err(Error::parse(
                    origin,
                    lineno,
                    format!("expected 2 tab-separated columns, found {}", cols.len()),
                ));
            }
            let rule = Rule::new(cols[0], cols[1]).map_err(|e| match e {
                Error::InvalidArgument(msg) => Error::parse(origin, lineno, msg),
                other => other,
            })?;
            table.insert(rule).map_err(|msg| Error::parse(origin, lineno, msg))?;
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// One of the bundled tables: `grek`, `hebr`, `arab` or `cipher`.
    pub fn builtin(name: &str) -> Result<Self> {
        let (_, text) = BUILTIN
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::InvalidArgument(format!("no bundled rule table named {name:?}")))?;
        Self::parse(text, Path::new(name))
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(n, _)| *n)
    }

    /// Loads `spec` as a bundled table name, falling back to a file path.
    pub fn resolve(spec: &str) -> Result<Self> {
        if Self::builtin_names().any(|n| n.eq_ignore_ascii_case(spec)) {
            Self::builtin(spec)
        } else {
            Self::load(spec)
        }
    }

    /// Union of several tables; a source defined twice is an error.
    pub fn merge(tables: impl IntoIterator<Item = RuleTable>) -> Result<Self> {
        let mut rules: Vec<Rule> = tables
            .into_iter()
            .flat_map(|t| t.by_first.into_values().flatten())
            .collect();
        rules.sort_by(|a, b| a.source.cmp(&b.source));
        Self::from_rules(rules)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Longest rule whose source is a prefix of `input`.
    pub fn longest_match(&self, input: &[char]) -> Option<&Rule> {
        let first = input.first()?;
        self.by_first.get(first)?.iter().find(|r| input.starts_with(&r.source))
    }
}

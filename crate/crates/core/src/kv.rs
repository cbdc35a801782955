//! Flat `key=value` files used for model and training configs.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed key-value file; blank lines and `#` comments are skipped.
#[derive(Debug, Default)]
pub(crate) struct KvFile {
    origin: String,
    entries: BTreeMap<String, (usize, String)>,
}

impl KvFile {
    pub(crate) fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::parse(origin, i + 1, format!("expected key=value, got {line:?}")));
            };
            let key = k.trim().to_string();
            if entries.insert(key.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::parse(origin, i + 1, format!("duplicate key {key:?}")));
            }
        }
        Ok(KvFile {
            origin: origin.to_string(),
            entries,
        })
    }

    pub(crate) fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Removes and parses `key`; `Ok(None)` when absent.
    pub(crate) fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::parse(&self.origin, line, format!("{key}: {e}"))),
        }
    }

    pub(crate) fn require<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.take(key)?
            .ok_or_else(|| Error::parse(&self.origin, 0, format!("missing key {key:?}")))
    }

    /// Fails if any key was not consumed.
    pub(crate) fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::parse(&self.origin, line, format!("unknown key {k:?}"))),
        }
    }
}

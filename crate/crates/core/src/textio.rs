//! One-sentence-per-line UTF-8 files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::translit::split_lines;

/// Reads LF-separated lines; invalid UTF-8 is reported with its line number.
pub fn read_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    split_lines(&bytes)
        .enumerate()
        .map(|(i, line)| {
            std::str::from_utf8(line)
                .map(|s| s.strip_suffix('\r').unwrap_or(s).to_string())
                .map_err(|e| Error::parse(path, i + 1, format!("invalid UTF-8: {e}")))
        })
        .collect()
}

/// Writes each item on its own line, LF-terminated.
pub fn write_lines<S: AsRef<str>>(path: impl AsRef<Path>, lines: &[S]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        writeln!(w, "{}", line.as_ref()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

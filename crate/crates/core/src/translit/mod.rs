//! Rule-based romanization into a common Latin script.
//!
//! Text is NFC-normalized and rewritten left to right. At each position the
//! longest matching rule source wins. ASCII and Latin-script characters pass
//! through untouched; any other character without a rule is dropped and
//! counted. Every output is therefore a fixed point of [`romanize`].

mod rules;
mod script;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub use rules::{is_output_char, Rule, RuleTable};
pub use script::{detect_script, script_of, ScriptCode};

/// Characters copied to the output without consulting the rule table.
pub fn is_passthrough(c: char) -> bool {
    c.is_ascii() || script_of(c) == Some(ScriptCode::LATN)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Romanized {
    pub text: String,
    /// Non-Latin characters that had no rule.
    pub dropped: usize,
}

pub fn romanize(text: &str, table: &RuleTable) -> String {
    romanize_counted(text, table).text
}

pub fn romanize_counted(text: &str, table: &RuleTable) -> Romanized {
    let chars: Vec<char> = text.nfc().collect();
    let mut out = Romanized {
        text: String::with_capacity(chars.len()),
        dropped: 0,
    };
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if is_passthrough(c) {
            out.text.push(c);
            i += 1;
        } else if let Some(rule) = table.longest_match(&chars[i..]) {
            out.text.push_str(rule.target());
            i += rule.source().len();
        } else {
            out.dropped += 1;
            i += 1;
        }
    }
    out
}

/// Romanizes a one-sentence-per-line file. Returns the number of lines written.
pub fn romanize_corpus(input: &Path, table: &RuleTable, output: &Path) -> Result<usize> {
    let bytes = fs::read(input).map_err(|e| Error::io(input, e))?;
    let file = fs::File::create(output).map_err(|e| Error::io(output, e))?;
    let mut writer = BufWriter::new(file);
    let mut count = 0;
    for (idx, line) in split_lines(&bytes).enumerate() {
        let line =
            std::str::from_utf8(line).map_err(|e| Error::parse(input, idx + 1, format!("invalid UTF-8: {e}")))?;
        writeln!(writer, "{}", romanize(line, table)).map_err(|e| Error::io(output, e))?;
        count += 1;
    }
    writer.flush().map_err(|e| Error::io(output, e))?;
    Ok(count)
}

/// LF-separated lines; a trailing terminator does not start an extra line.
pub(crate) fn split_lines(bytes: &[u8]) -> impl Iterator<Item = &[u8]> {
    let body = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    let empty = bytes.is_empty();
    body.split(|&b| b == b'\n').filter(move |_| !empty)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn greek() -> RuleTable {
        RuleTable::builtin("grek").unwrap()
    }

    #[test]
    fn latin_passes_through() {
        assert_eq!(romanize("abc 123", &greek()), "abc 123");
        assert_eq!(romanize("café, naïve!", &greek()), "café, naïve!");
    }

    #[test]
    fn greek_examples() {
        assert_eq!(romanize("αβγ", &greek()), "abg");
        assert_eq!(romanize("", &greek()), "");
    }

    #[test]
    fn unknown_characters_dropped_and_counted() {
        let r = romanize_counted("aשb", &greek());
        assert_eq!(r.text, "ab");
        assert_eq!(r.dropped, 1);
    }

    #[test]
    fn decomposed_input_matches_composed_rule() {
        // ά written as alpha + combining acute
        assert_eq!(romanize("\u{03B1}\u{0301}", &greek()), "a");
    }

    #[test]
    fn longest_match_precedence() {
        let t = RuleTable::parse("α\ty\nαβ\tx\nβ\tz\n", Path::new("t")).unwrap();
        assert_eq!(romanize("αβ", &t), "x");
        assert_eq!(romanize("αα", &t), "yy");
        assert_eq!(romanize("βαβ", &t), "zx");
    }

    // Reference romanizations produced by the uroman tool for words without
    // context-dependent clusters.
    #[test]
    fn agrees_with_reference_romanizer() {
        let cases: &[(&str, &str, &str)] = &[
            ("grek", "Ελλάδα", "Ellada"),
            ("grek", "ουρανός", "ouranos"),
            ("grek", "θάλασσα", "thalassa"),
            ("grek", "ψυχή", "psyche"),
            ("grek", "χαρά", "chara"),
            ("grek", "ξένος", "xenos"),
            ("grek", "φως", "fos"),
            ("grek", "η γη", "e ge"),
            ("hebr", "שלום", "shlvm"),
            ("hebr", "ישראל", "yshral"),
            ("hebr", "ספר", "sfr"),
            ("hebr", "בית", "vyt"),
            ("hebr", "מלך", "mlk"),
            ("hebr", "ארץ", "arts"),
            ("arab", "مرحبا", "mrhba"),
            ("arab", "كتاب", "ktab"),
            ("arab", "السلام", "alslam"),
            ("arab", "مدرسة", "mdrsa"),
            ("arab", "قلم", "qlm"),
            ("arab", "پدر", "pdr"),
            ("arab", "١٩٨٤", "1984"),
        ];
        for &(table, input, expected) in cases {
            let t = RuleTable::builtin(table).unwrap();
            assert_eq!(romanize(input, &t), expected, "{table}: {input}");
        }
    }

    #[test]
    fn corpus_lines_match_romanize() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        let output = dir.path().join("out.txt");

        fs::write(&input, "one\ntwo\nthree\n").unwrap();
        assert_eq!(romanize_corpus(&input, &greek(), &output).unwrap(), 3);
        assert_eq!(fs::read_to_string(&output).unwrap(), "one\ntwo\nthree\n");

        fs::write(&input, "καλημέρα κόσμε").unwrap();
        assert_eq!(romanize_corpus(&input, &greek(), &output).unwrap(), 1);
        let expected = format!("{}\n", romanize("καλημέρα κόσμε", &greek()));
        assert_eq!(fs::read_to_string(&output).unwrap(), expected);

        fs::write(&input, "").unwrap();
        assert_eq!(romanize_corpus(&input, &greek(), &output).unwrap(), 0);
        assert_eq!(fs::read_to_string(&output).unwrap(), "");
    }

    #[test]
    fn corpus_invalid_utf8_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        fs::write(&input, b"ok\nok\n\xff\xfe\n").unwrap();
        let err = romanize_corpus(&input, &greek(), &dir.path().join("o")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn blank_lines_are_kept() {
        let lines: Vec<&[u8]> = split_lines(b"a\n\nb\n").collect();
        assert_eq!(lines, vec![&b"a"[..], b"", b"b"]);
        assert_eq!(split_lines(b"").count(), 0);
        assert_eq!(split_lines(b"\n").count(), 1);
    }
}

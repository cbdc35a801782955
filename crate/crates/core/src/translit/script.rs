use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Four-letter ISO 15924 script identifier such as `Latn` or `Grek`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScriptCode([u8; 4]);

impl ScriptCode {
    pub const LATN: ScriptCode = ScriptCode::from_static("Latn");
    pub const GREK: ScriptCode = ScriptCode::from_static("Grek");
    pub const HEBR: ScriptCode = ScriptCode::from_static("Hebr");
    pub const ARAB: ScriptCode = ScriptCode::from_static("Arab");

    const fn from_static(code: &'static str) -> Self {
        let b = code.as_bytes();
        assert!(b.len() == 4);
        assert!(b[0].is_ascii_uppercase());
        assert!(b[1].is_ascii_lowercase() && b[2].is_ascii_lowercase() && b[3].is_ascii_lowercase());
        ScriptCode([b[0], b[1], b[2], b[3]])
    }

    pub fn as_str(&self) -> &str {
        // Constructed only from validated ASCII.
        std::str::from_utf8(&self.0).expect("script codes are ASCII")
    }
}

impl FromStr for ScriptCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let b = s.as_bytes();
        let valid = b.len() == 4 && b[0].is_ascii_uppercase() && b[1..].iter().all(|c| c.is_ascii_lowercase());
        if !valid {
            return Err(Error::InvalidArgument(format!(
                "script code must be one uppercase and three lowercase ASCII letters, got {s:?}"
            )));
        }
        Ok(ScriptCode([b[0], b[1], b[2], b[3]]))
    }
}

impl fmt::Display for ScriptCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Debug for ScriptCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ScriptCode({})", self.as_str())
    }
}

const fn s(code: &'static str) -> ScriptCode {
    ScriptCode::from_static(code)
}

// Script property ranges for script-bearing code points, sorted by start.
// Common and Inherited code points (punctuation, digits, combining marks) are
// deliberately absent so they do not vote.
static SCRIPT_RANGES: &[(u32, u32, ScriptCode)] = &[
    (0x0041, 0x005A, s("Latn")),
    (0x0061, 0x007A, s("Latn")),
    (0x00AA, 0x00AA, s("Latn")),
    (0x00BA, 0x00BA, s("Latn")),
    (0x00C0, 0x00D6, s("Latn")),
    (0x00D8, 0x00F6, s("Latn")),
    (0x00F8, 0x02AF, s("Latn")),
    (0x0370, 0x0373, s("Grek")),
    (0x0375, 0x0377, s("Grek")),
    (0x037A, 0x037D, s("Grek")),
    (0x037F, 0x037F, s("Grek")),
    (0x0384, 0x0384, s("Grek")),
    (0x0386, 0x0386, s("Grek")),
    (0x0388, 0x03E1, s("Grek")),
    (0x03E2, 0x03EF, s("Copt")),
    (0x03F0, 0x03FF, s("Grek")),
    (0x0400, 0x0484, s("Cyrl")),
    (0x0487, 0x052F, s("Cyrl")),
    (0x0531, 0x0588, s("Armn")),
    (0x058A, 0x058F, s("Armn")),
    (0x0591, 0x05F4, s("Hebr")),
    (0x0600, 0x0604, s("Arab")),
    (0x0606, 0x060B, s("Arab")),
    (0x060D, 0x061A, s("Arab")),
    (0x061C, 0x061E, s("Arab")),
    (0x0620, 0x063F, s("Arab")),
    (0x0641, 0x064A, s("Arab")),
    (0x0656, 0x066F, s("Arab")),
    (0x0671, 0x06DC, s("Arab")),
    (0x06DE, 0x06FF, s("Arab")),
    (0x0700, 0x074F, s("Syrc")),
    (0x0750, 0x077F, s("Arab")),
    (0x0780, 0x07BF, s("Thaa")),
    (0x07C0, 0x07FF, s("Nkoo")),
    (0x08A0, 0x08E1, s("Arab")),
    (0x08E3, 0x08FF, s("Arab")),
    (0x0900, 0x0950, s("Deva")),
    (0x0955, 0x0963, s("Deva")),
    (0x0966, 0x097F, s("Deva")),
    (0x0980, 0x09FF, s("Beng")),
    (0x0A00, 0x0A7F, s("Guru")),
    (0x0A80, 0x0AFF, s("Gujr")),
    (0x0B00, 0x0B7F, s("Orya")),
    (0x0B80, 0x0BFF, s("Taml")),
    (0x0C00, 0x0C7F, s("Telu")),
    (0x0C80, 0x0CFF, s("Knda")),
    (0x0D00, 0x0D7F, s("Mlym")),
    (0x0D80, 0x0DFF, s("Sinh")),
    (0x0E01, 0x0E3A, s("Thai")),
    (0x0E40, 0x0E5B, s("Thai")),
    (0x0E80, 0x0EFF, s("Laoo")),
    (0x0F00, 0x0FD4, s("Tibt")),
    (0x0FD9, 0x0FFF, s("Tibt")),
    (0x1000, 0x109F, s("Mymr")),
    (0x10A0, 0x10FA, s("Geor")),
    (0x10FC, 0x10FF, s("Geor")),
    (0x1100, 0x11FF, s("Hang")),
    (0x1200, 0x139F, s("Ethi")),
    (0x13A0, 0x13FF, s("Cher")),
    (0x1780, 0x17FF, s("Khmr")),
    (0x1800, 0x1801, s("Mong")),
    (0x1804, 0x1804, s("Mong")),
    (0x1806, 0x18AF, s("Mong")),
    (0x1C80, 0x1C8F, s("Cyrl")),
    (0x1D00, 0x1D25, s("Latn")),
    (0x1E00, 0x1EFF, s("Latn")),
    (0x1F00, 0x1FFF, s("Grek")),
    (0x2C60, 0x2C7F, s("Latn")),
    (0x2C80, 0x2CFF, s("Copt")),
    (0x2D00, 0x2D2F, s("Geor")),
    (0x2D80, 0x2DDF, s("Ethi")),
    (0x2DE0, 0x2DFF, s("Cyrl")),
    (0x2E80, 0x2FDF, s("Hani")),
    (0x3005, 0x3005, s("Hani")),
    (0x3007, 0x3007, s("Hani")),
    (0x3021, 0x3029, s("Hani")),
    (0x3038, 0x303B, s("Hani")),
    (0x3041, 0x309A, s("Hira")),
    (0x309D, 0x309F, s("Hira")),
    (0x30A1, 0x30FA, s("Kana")),
    (0x30FD, 0x30FF, s("Kana")),
    (0x3100, 0x312F, s("Bopo")),
    (0x3131, 0x318E, s("Hang")),
    (0x31F0, 0x31FF, s("Kana")),
    (0x3400, 0x4DBF, s("Hani")),
    (0x4E00, 0x9FFF, s("Hani")),
    (0xA640, 0xA69F, s("Cyrl")),
    (0xA722, 0xA787, s("Latn")),
    (0xA78B, 0xA7FF, s("Latn")),
    (0xAC00, 0xD7A3, s("Hang")),
    (0xF900, 0xFAFF, s("Hani")),
    (0xFB00, 0xFB06, s("Latn")),
    (0xFB13, 0xFB17, s("Armn")),
    (0xFB1D, 0xFB4F, s("Hebr")),
    (0xFB50, 0xFD3D, s("Arab")),
    (0xFD40, 0xFDFF, s("Arab")),
    (0xFE70, 0xFEFC, s("Arab")),
    (0xFF21, 0xFF3A, s("Latn")),
    (0xFF41, 0xFF5A, s("Latn")),
    (0xFF66, 0xFF6F, s("Kana")),
    (0xFF71, 0xFF9D, s("Kana")),
    (0x20000, 0x2FFFF, s("Hani")),
];

/// Script of a single code point, or `None` for Common/Inherited/unlisted.
pub fn script_of(c: char) -> Option<ScriptCode> {
    let cp = c as u32;
    let idx = SCRIPT_RANGES.partition_point(|&(start, _, _)| start <= cp);
    if idx == 0 {
        return None;
    }
    let (start, end, code) = SCRIPT_RANGES[idx - 1];
    (start..=end).contains(&cp).then_some(code)
}

/// Majority script among the script-bearing code points of `text`.
///
/// Ties go to the script seen first. Text without any script-bearing code
/// point is reported as Latin.
pub fn detect_script(text: &str) -> ScriptCode {
    // (script, count, first position)
    let mut tally: Vec<(ScriptCode, usize, usize)> = Vec::new();
    for (pos, c) in text.chars().enumerate() {
        let Some(code) = script_of(c) else { continue };
        match tally.iter_mut().find(|(s, _, _)| *s == code) {
            Some(entry) => entry.1 += 1,
            None => tally.push((code, 1, pos)),
        }
    }
    tally
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2)))
        .map(|(code, _, _)| code)
        .unwrap_or(ScriptCode::LATN)
}

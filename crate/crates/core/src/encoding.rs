//! Password ⇄ vector encoding.
//!
//! A password of at most `D` characters becomes a `D`-vector whose `i`-th entry
//! is `index(p[i]) / |Σ|`, with trailing positions holding the pad value 0.
//! Decoding projects each coordinate onto the nearest lattice point and stops at
//! the first pad, so it is total over arbitrary real vectors.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default password length.
pub const DEFAULT_DIM: usize = 10;

/// Ordered alphabet. Index 0 is reserved for padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Charset {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Charset {
    /// Pad plus printable ASCII `0x20..=0x7E` in code-point order (|Σ| = 96).
    pub fn printable_ascii() -> Self {
        Self::from_symbols((0x20u8..=0x7e).map(char::from)).expect("printable ASCII is a valid charset")
    }

    /// Builds a charset from the printable symbols; the pad slot is added in front.
    pub fn from_symbols<I: IntoIterator<Item = char>>(symbols: I) -> Result<Self> {
        let symbols: Vec<char> = symbols.into_iter().collect();
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, &c) in symbols.iter().enumerate() {
            if index.insert(c, i + 1).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate charset symbol {c:?}")));
            }
        }
        if symbols.is_empty() {
            return Err(Error::InvalidConfig("charset needs at least one symbol".into()));
        }
        Ok(Self { symbols, index })
    }

    /// |Σ|, counting the pad slot.
    pub fn size(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn pad_index(&self) -> usize {
        0
    }

    /// Printable symbols in index order (index `i + 1` for element `i`).
    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn symbol(&self, index: usize) -> Option<char> {
        index.checked_sub(1).and_then(|i| self.symbols.get(i)).copied()
    }

    /// Hex SHA-256 of the ordered symbol list, used to bind checkpoints to a charset.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.symbols {
            let mut buf = [0u8; 4];
            h.update(c.encode_utf8(&mut buf).as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Symbols as a single string, the form stored in checkpoint headers.
    pub fn symbols_string(&self) -> String {
        self.symbols.iter().collect()
    }
}

impl Default for Charset {
    fn default() -> Self {
        Self::printable_ascii()
    }
}

/// Fixed-length numeric encoding of a password.
#[derive(Debug, Clone, PartialEq)]
pub struct DataVector(Vec<f64>);

impl DataVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for DataVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn encode_password(password: &str, cs: &Charset, dim: usize) -> Result<DataVector> {
    let len = password.chars().count();
    if len > dim {
        return Err(Error::TooLong { len, max: dim });
    }
    let scale = cs.size() as f64;
    let mut values = vec![0.0; dim];
    for (slot, ch) in values.iter_mut().zip(password.chars()) {
        let idx = cs.index_of(ch).ok_or(Error::CharOutOfAlphabet { ch })?;
        *slot = idx as f64 / scale;
    }
    Ok(DataVector(values))
}

/// Nearest-lattice decoding of a single coordinate.
pub fn decode_index(value: f64, cs: &Charset) -> usize {
    let size = cs.size() as f64;
    if value.is_nan() {
        return 0;
    }
    let v = value.clamp(0.0, 1.0 - 0.5 / size);
    ((v * size).round() as usize).min(cs.size() - 1)
}

pub fn decode_vector(values: &[f64], cs: &Charset) -> String {
    values
        .iter()
        .map(|&v| decode_index(v, cs))
        .take_while(|&i| i != 0)
        .filter_map(|i| cs.symbol(i))
        .collect()
}

/// Why a corpus line was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SkipReason {
    Empty,
    TooLong,
    BadChar,
    Duplicate,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SkipReport {
    pub empty: usize,
    pub too_long: usize,
    pub bad_char: usize,
    pub duplicate: usize,
}

impl SkipReport {
    fn record(&mut self, reason: SkipReason) {
        match reason {
            SkipReason::Empty => self.empty += 1,
            SkipReason::TooLong => self.too_long += 1,
            SkipReason::BadChar => self.bad_char += 1,
            SkipReason::Duplicate => self.duplicate += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.empty + self.too_long + self.bad_char + self.duplicate
    }
}

impl fmt::Display for SkipReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "skipped empty={} too_long={} bad_char={} duplicate={}",
            self.empty, self.too_long, self.bad_char, self.duplicate
        )
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub passwords: Vec<String>,
    pub skipped: SkipReport,
}

/// Filters lines to those encodable under `(cs, dim)`.
pub fn filter_corpus<I, S>(lines: I, cs: &Charset, dim: usize, dedupe: bool) -> Result<Corpus>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut skipped = SkipReport::default();
    let mut passwords = Vec::new();
    let mut seen = HashSet::new();
    for line in lines {
        let line = line.as_ref();
        let line = line.strip_suffix('\r').unwrap_or(line);
        let verdict = if line.is_empty() {
            Some(SkipReason::Empty)
        } else if line.chars().count() > dim {
            Some(SkipReason::TooLong)
        } else if line.chars().any(|c| cs.index_of(c).is_none()) {
            Some(SkipReason::BadChar)
        } else if dedupe && !seen.insert(line.to_owned()) {
            Some(SkipReason::Duplicate)
        } else {
            None
        };
        match verdict {
            Some(reason) => skipped.record(reason),
            None => passwords.push(line.to_owned()),
        }
    }
    if passwords.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(Corpus { passwords, skipped })
}

pub fn load_corpus(path: &Path, cs: &Charset, dim: usize, dedupe: bool) -> Result<Corpus> {
    let text = fs::read_to_string(path)?;
    filter_corpus(text.lines(), cs, dim, dedupe)
}

/// Encodes every password; callers are expected to have filtered already.
pub fn encode_all(passwords: &[String], cs: &Charset, dim: usize) -> Result<Vec<DataVector>> {
    passwords.iter().map(|p| encode_password(p, cs, dim)).collect()
}

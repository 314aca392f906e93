//! Character set and transcript tokenization.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Ordered character classes plus two reserved ids: end-of-sequence at `len()`
/// and padding at `len() + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Charset {
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

impl Charset {
    pub fn new(chars: &str) -> Result<Self> {
        let chars: Vec<char> = chars.chars().collect();
        if chars.is_empty() {
            return Err(Error::Config("charset is empty".into()));
        }
        let mut index = HashMap::new();
        for (i, &c) in chars.iter().enumerate() {
            if c.is_whitespace() {
                return Err(Error::Config(format!("charset contains whitespace {c:?}")));
            }
            if index.insert(c, i as u32).is_some() {
                return Err(Error::Config(format!("charset repeats {c:?}")));
            }
        }
        Ok(Self { chars, index })
    }

    /// Number of character classes, excluding the reserved ids.
    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn eos(&self) -> u32 {
        self.chars.len() as u32
    }

    pub fn pad(&self) -> u32 {
        self.chars.len() as u32 + 1
    }

    /// Characters plus end and padding classes.
    pub fn num_classes(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    /// Characters followed by the end marker, padded to `capacity` ids.
    pub fn encode(&self, s: &str, capacity: usize) -> Result<Vec<u32>> {
        let mut missing: Vec<char> = s.chars().filter(|c| !self.index.contains_key(c)).collect();
        if !missing.is_empty() {
            missing.dedup();
            return Err(Error::OutOfCharset(missing));
        }
        let len = s.chars().count();
        if len + 1 > capacity {
            return Err(Error::TranscriptTooLong {
                len,
                capacity: capacity.saturating_sub(1),
            });
        }
        let mut ids: Vec<u32> = s.chars().map(|c| self.index[&c]).collect();
        ids.push(self.eos());
        ids.resize(capacity, self.pad());
        Ok(ids)
    }

    /// Reads characters up to the first end marker; padding ids are skipped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == self.eos() {
                break;
            }
            if let Some(&c) = self.chars.get(id as usize) {
                out.push(c);
            }
        }
        out
    }
}

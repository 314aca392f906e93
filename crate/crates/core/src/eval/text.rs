//! Transcript normalization, edit distance and lexicon correction.

use crate::error::{Error, Result};

/// Case-folded, whitespace-stripped form used for every comparison.
pub fn normalize(s: &str) -> String {
    s.chars().filter(|c| !c.is_whitespace()).flat_map(char::to_lowercase).collect()
}

/// Levenshtein distance over characters.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by the longer length; 0 for two empty strings.
pub fn normalized_distance(a: &str, b: &str) -> f64 {
    let n = a.chars().count().max(b.chars().count());
    if n == 0 {
        0.0
    } else {
        edit_distance(a, b) as f64 / n as f64
    }
}

/// A word list for transcript correction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    words: Vec<String>,
}

impl Lexicon {
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut words: Vec<String> = words
            .into_iter()
            .map(|w| normalize(w.as_ref()))
            .filter(|w| !w.is_empty())
            .collect();
        words.sort();
        words.dedup();
        if words.is_empty() {
            return Err(Error::EmptyLexicon);
        }
        Ok(Self { words })
    }

    /// One word per line.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(text.lines())
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// The nearest word by edit distance, ties going to the lexicographically
    /// smallest. Keeps `word` when even the nearest is more than half its
    /// length (rounded up) away.
    pub fn correct(&self, word: &str) -> String {
        let word = normalize(word);
        let (dist, best) = self
            .words
            .iter()
            .map(|w| (edit_distance(&word, w), w))
            .min()
            .expect("lexicon is non-empty");
        if dist > word.chars().count().div_ceil(2) {
            word
        } else {
            best.clone()
        }
    }
}

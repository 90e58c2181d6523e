//! Shared text utilities: answer normalization, tokenization, stopwords.
//!
//! Every stage that compares strings (metric, vocabulary, overlap
//! labels, weak supervision) goes through the same two primitives so
//! the comparisons cannot drift apart:
//!
//! * [`normalize_answer`] — lowercase, trim, collapse internal
//!   whitespace, strip terminal punctuation.
//! * [`tokens`] — lowercase word set split on non-alphanumeric
//!   characters (punctuation is discarded).

use std::collections::BTreeSet;

/// Default stopword list shipped with the crate (one word per line,
/// `#` starts a comment). Used to decide which answer tokens count as
/// content when matching answers against inference sentences.
pub const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");

/// Canonical answer form: lowercase, trimmed, internal whitespace
/// collapsed to single spaces, terminal punctuation stripped.
///
/// Applied identically at dataset ingestion, vocabulary construction
/// and metric time.
pub fn normalize_answer(raw: &str) -> String {
    let lower = raw.to_lowercase();
    let mut out = String::with_capacity(lower.len());
    let mut last_space = true;
    for ch in lower.trim().chars() {
        if ch.is_whitespace() {
            if !last_space {
                out.push(' ');
                last_space = true;
            }
        } else {
            out.push(ch);
            last_space = false;
        }
    }
    while out
        .chars()
        .last()
        .is_some_and(|c| matches!(c, '.' | ',' | ';' | ':' | '!' | '?'))
    {
        out.pop();
    }
    // Stripping punctuation can expose trailing whitespace ("dog ." -> "dog ").
    while out.ends_with(' ') {
        out.pop();
    }
    out
}

/// Lowercased word tokens of `s`, split on any non-alphanumeric
/// character, in order of appearance. Empty for punctuation-only input.
pub fn token_list(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Token set of `s` (see [`token_list`]); duplicates collapse.
pub fn tokens(s: &str) -> BTreeSet<String> {
    token_list(s).into_iter().collect()
}

/// A stopword list loaded from a one-word-per-line file.
#[derive(Debug, Clone)]
pub struct Stopwords {
    words: BTreeSet<String>,
}

impl Stopwords {
    /// Parse from file contents: one word per line, `#` comments and
    /// blank lines skipped, entries lowercased.
    pub fn parse(contents: &str) -> Self {
        let words = parse_word_lines(contents).into_iter().collect();
        Stopwords { words }
    }

    /// The list shipped with the crate (~50 function words).
    pub fn default_list() -> Self {
        Self::parse(DEFAULT_STOPWORDS)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Content tokens of `s`: the token list with stopwords removed.
    pub fn content_tokens(&self, s: &str) -> Vec<String> {
        token_list(s)
            .into_iter()
            .filter(|t| !self.contains(t))
            .collect()
    }
}

/// Shared parser for one-entry-per-line word files: blank lines and
/// lines starting with `#` are skipped, entries are lowercased and
/// trimmed. Multi-word entries (phrases) are preserved as-is.
pub fn parse_word_lines(contents: &str) -> Vec<String> {
    contents
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.to_lowercase())
        .collect()
}

//! Question-subset filter used for per-category evaluation.
//!
//! Questions that hinge on outside factual knowledge, numbers/dates, or
//! reading visual symbols are excluded from the commonsense subset;
//! everything else is retained. When several rules fire, the exclusion
//! reason is the first in the order factual > numerical > visual.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::text::{parse_word_lines, token_list};
use crate::{Error, Result};

use super::QuestionRecord;

/// Why a record was excluded from the commonsense subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExclusionReason {
    Factual,
    Numerical,
    Visual,
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExclusionReason::Factual => write!(f, "factual"),
            ExclusionReason::Numerical => write!(f, "numerical"),
            ExclusionReason::Visual => write!(f, "visual"),
        }
    }
}

/// Filter outcome. `retained` is true exactly when no exclusion reason
/// fired, which the constructor enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubsetVerdict {
    reason: Option<ExclusionReason>,
}

impl SubsetVerdict {
    pub fn retained(&self) -> bool {
        self.reason.is_none()
    }

    pub fn reason(&self) -> Option<ExclusionReason> {
        self.reason
    }
}

/// The editable word lists the filter consults.
#[derive(Debug, Clone)]
pub struct WordLists {
    gazetteer: Vec<String>,
    number_words: BTreeSet<String>,
    datetime_words: BTreeSet<String>,
    directional: Vec<String>,
    symbol_words: Vec<String>,
}

const DEFAULT_GAZETTEER: &str = include_str!("../../data/wordlists/gazetteer.txt");
const DEFAULT_NUMBER_WORDS: &str = include_str!("../../data/wordlists/number_words.txt");
const DEFAULT_DATETIME_WORDS: &str = include_str!("../../data/wordlists/datetime_words.txt");
const DEFAULT_DIRECTIONAL: &str = include_str!("../../data/wordlists/directional_words.txt");
const DEFAULT_SYMBOL_WORDS: &str = include_str!("../../data/wordlists/symbol_words.txt");

impl WordLists {
    /// Lists shipped with the crate.
    pub fn default_lists() -> Self {
        WordLists {
            gazetteer: parse_word_lines(DEFAULT_GAZETTEER),
            number_words: parse_word_lines(DEFAULT_NUMBER_WORDS).into_iter().collect(),
            datetime_words: parse_word_lines(DEFAULT_DATETIME_WORDS).into_iter().collect(),
            directional: parse_word_lines(DEFAULT_DIRECTIONAL),
            symbol_words: parse_word_lines(DEFAULT_SYMBOL_WORDS),
        }
    }

    /// Load all five lists from a directory containing `gazetteer.txt`,
    /// `number_words.txt`, `datetime_words.txt`, `directional_words.txt`
    /// and `symbol_words.txt`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            let path = dir.join(name);
            std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
        };
        Ok(WordLists {
            gazetteer: parse_word_lines(&read("gazetteer.txt")?),
            number_words: parse_word_lines(&read("number_words.txt")?).into_iter().collect(),
            datetime_words: parse_word_lines(&read("datetime_words.txt")?)
                .into_iter()
                .collect(),
            directional: parse_word_lines(&read("directional_words.txt")?),
            symbol_words: parse_word_lines(&read("symbol_words.txt")?),
        })
    }

    /// Write the current lists into `dir` so users can edit them.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, entries: &[String]| -> Result<()> {
            let path = dir.join(name);
            let body = entries.join("\n") + "\n";
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
        };
        write("gazetteer.txt", &self.gazetteer)?;
        let numbers: Vec<String> = self.number_words.iter().cloned().collect();
        write("number_words.txt", &numbers)?;
        let datetimes: Vec<String> = self.datetime_words.iter().cloned().collect();
        write("datetime_words.txt", &datetimes)?;
        write("directional_words.txt", &self.directional)?;
        write("symbol_words.txt", &self.symbol_words)
    }
}

/// True when `entry` (a single word or a multi-word phrase) occurs in
/// the token sequence on word boundaries.
fn entry_in_tokens(entry: &str, tokens: &[String]) -> bool {
    let entry_tokens = token_list(entry);
    if entry_tokens.is_empty() || entry_tokens.len() > tokens.len() {
        return false;
    }
    tokens
        .windows(entry_tokens.len())
        .any(|window| window.iter().zip(&entry_tokens).all(|(a, b)| a == b))
}

fn any_entry_in_tokens(entries: &[String], tokens: &[String]) -> bool {
    entries.iter().any(|e| entry_in_tokens(e, tokens))
}

/// A capitalized token that is not at sentence start suggests a proper
/// name, e.g. "the Statue of Liberty".
fn has_mid_sentence_capital(question: &str) -> bool {
    let mut sentence_start = true;
    for raw in question.split_whitespace() {
        let word = raw.trim_matches(|c: char| !c.is_alphanumeric());
        if word.is_empty() {
            continue;
        }
        let capitalized = word.chars().next().is_some_and(char::is_uppercase)
            && word.chars().any(char::is_lowercase);
        if capitalized && !sentence_start {
            return true;
        }
        sentence_start = raw.ends_with(['.', '?', '!']);
    }
    false
}

/// Classify a record for the commonsense subset.
///
/// Rules, in precedence order:
/// * factual — a gazetteer entry appears in the question or answers, or
///   the question carries a mid-sentence capitalized token;
/// * numerical — an answer contains a digit or number word, or the
///   question contains a date/time word;
/// * visual — the question contains a directional or symbol word.
pub fn subset_filter(record: &QuestionRecord, lists: &WordLists) -> SubsetVerdict {
    let question_tokens = token_list(&record.question);
    let answer_tokens: Vec<Vec<String>> = record
        .answers
        .iter()
        .map(|a| token_list(&a.answer))
        .collect();

    let factual = any_entry_in_tokens(&lists.gazetteer, &question_tokens)
        || answer_tokens
            .iter()
            .any(|t| any_entry_in_tokens(&lists.gazetteer, t))
        || has_mid_sentence_capital(&record.question);
    if factual {
        return SubsetVerdict {
            reason: Some(ExclusionReason::Factual),
        };
    }

    let numerical = answer_tokens.iter().any(|ts| {
        ts.iter().any(|t| {
            t.chars().any(|c| c.is_ascii_digit()) || lists.number_words.contains(t.as_str())
        })
    }) || question_tokens
        .iter()
        .any(|t| lists.datetime_words.contains(t.as_str()));
    if numerical {
        return SubsetVerdict {
            reason: Some(ExclusionReason::Numerical),
        };
    }

    let visual = any_entry_in_tokens(&lists.directional, &question_tokens)
        || any_entry_in_tokens(&lists.symbol_words, &question_tokens);
    if visual {
        return SubsetVerdict {
            reason: Some(ExclusionReason::Visual),
        };
    }

    SubsetVerdict { reason: None }
}

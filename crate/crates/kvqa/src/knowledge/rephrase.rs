//! Question-to-declarative rephrasing.
//!
//! A small ordered table of wh-patterns (first match wins) turns a
//! question into the stem of a declarative sentence, ready for a
//! knowledge model to complete. Inputs that are already declarative
//! pass through unchanged, and a total fallback guarantees an answer
//! for any question the table misses.

use std::path::Path;

use regex::{Regex, RegexBuilder};
use serde::Deserialize;

use crate::{Error, Result};

const DEFAULT_RULES: &str = include_str!("../../data/rephrase_rules.json");

const WH_WORDS: [&str; 9] = [
    "what", "where", "when", "why", "who", "whom", "whose", "which", "how",
];

#[derive(Debug, Deserialize)]
struct RuleSpec {
    pattern: String,
    replacement: String,
}

/// Ordered rewrite rules, each a case-insensitive anchored regex with a
/// capture-group replacement template.
#[derive(Debug, Clone)]
pub struct RephraseRules {
    rules: Vec<(Regex, String)>,
}

impl RephraseRules {
    /// Rules shipped with the crate.
    pub fn default_rules() -> Self {
        Self::parse(DEFAULT_RULES).expect("bundled rephrase rules are valid")
    }

    pub fn parse(json: &str) -> Result<Self> {
        let specs: Vec<RuleSpec> = serde_json::from_str(json)
            .map_err(|e| Error::Config(format!("rephrase rules: {e}")))?;
        let mut rules = Vec::with_capacity(specs.len());
        for spec in specs {
            let regex = RegexBuilder::new(&spec.pattern)
                .case_insensitive(true)
                .build()
                .map_err(|e| {
                    Error::Config(format!("rephrase rule {:?} is not a valid regex: {e}", spec.pattern))
                })?;
            rules.push((regex, spec.replacement));
        }
        Ok(RephraseRules { rules })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let contents = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&contents)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

fn starts_with_wh(text: &str) -> bool {
    let first = text
        .split(|c: char| !c.is_alphanumeric())
        .find(|t| !t.is_empty())
        .unwrap_or("")
        .to_lowercase();
    WH_WORDS.contains(&first.as_str())
}

fn capitalize(text: &str) -> String {
    let mut chars = text.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

/// Rephrase a question into a declarative stem.
///
/// Already-declarative input (no terminal `?`, no leading wh-word) is
/// returned unchanged. Otherwise the first matching rule applies; if
/// none matches, the fallback strips the leading wh-word and terminal
/// `?` and appends " is". The result never ends with `?`.
pub fn rephrase_question(question: &str, rules: &RephraseRules) -> String {
    let trimmed = question.trim();
    if !trimmed.ends_with('?') && !starts_with_wh(trimmed) {
        return trimmed.to_string();
    }

    for (regex, replacement) in &rules.rules {
        if regex.is_match(trimmed) {
            let rewritten = regex.replace(trimmed, replacement.as_str());
            return capitalize(rewritten.trim().trim_end_matches('?').trim());
        }
    }

    // Fallback: drop the wh-word and the question mark, append " is".
    let mut rest = trimmed.trim_end_matches('?').trim();
    if starts_with_wh(rest) {
        rest = rest
            .split_once(|c: char| c.is_whitespace())
            .map_or("", |(_, tail)| tail)
            .trim();
    }
    if rest.is_empty() {
        return String::new();
    }
    capitalize(&format!("{rest} is"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rephrase(q: &str) -> String {
        rephrase_question(q, &RephraseRules::default_rules())
    }

    #[test]
    fn purpose_question_follows_the_reference_rewrite() {
        assert_eq!(
            rephrase("What is the purpose of the umbrella?"),
            "The purpose of the umbrellas is"
        );
    }

    #[test]
    fn where_might_one_moves_the_modal() {
        assert_eq!(rephrase("Where might one buy this?"), "One might buy this at");
    }

    #[test]
    fn declarative_input_is_unchanged() {
        assert_eq!(
            rephrase("The purpose of the umbrella is"),
            "The purpose of the umbrella is"
        );
    }

    #[test]
    fn fallback_strips_wh_word_and_question_mark() {
        // No wh-word: only the question mark goes.
        assert_eq!(rephrase("Zorp the fleeb?"), "Zorp the fleeb is");
        // Leading wh-word without a matching rule.
        assert_eq!(rephrase("Whose shoes?"), "Shoes is");
    }

    #[test]
    fn rewrites_never_end_with_question_marks() {
        let questions = [
            "What is this used for?",
            "What color is the umbrella?",
            "Where is the dog?",
            "Who is the rider?",
            "How many chairs are there?",
            "Why is the man running?",
            "When was this invented?",
            "Blargh?",
        ];
        for q in questions {
            let d = rephrase(q);
            assert!(!d.ends_with('?'), "{q:?} -> {d:?}");
            assert!(!d.is_empty(), "{q:?} produced empty output");
        }
    }

    #[test]
    fn used_for_question_keeps_its_verb_phrase() {
        assert_eq!(rephrase("What is this item used for?"), "This item is used for");
    }

    #[test]
    fn material_and_capability_questions_keep_their_verb_phrases() {
        assert_eq!(rephrase("What is this item made of?"), "This item is made up of");
        assert_eq!(
            rephrase("What is the kite made up of?"),
            "The kite is made up of"
        );
        assert_eq!(
            rephrase("What is this item capable of?"),
            "This item is capable of"
        );
    }

    #[test]
    fn invalid_rule_regex_is_a_config_error() {
        let err = RephraseRules::parse(r#"[{"pattern": "([", "replacement": "x"}]"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}

//! Word-level tokenizer: lowercase, split on non-alphanumerics, one
//! OOV token, vocabulary harvested from the training corpus with a
//! minimum frequency of one.

use std::collections::BTreeMap;

use crate::text::token_list;
use crate::{Error, Result};

pub const TOKEN_CLS: usize = 0;
pub const TOKEN_SEP: usize = 1;
pub const TOKEN_MASK: usize = 2;
pub const TOKEN_END: usize = 3;
pub const TOKEN_UNK: usize = 4;
/// Reserved ids below the first real word.
pub const NUM_SPECIAL: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Tokenizer {
    /// Harvest a vocabulary from training texts. Every token that
    /// appears at least once is kept, in lexicographic order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut seen = std::collections::BTreeSet::new();
        for text in texts {
            for tok in token_list(text) {
                seen.insert(tok);
            }
        }
        Self::from_words(seen.into_iter().collect()).expect("set iteration is sorted and unique")
    }

    /// Rebuild a tokenizer from a stored word list.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), NUM_SPECIAL + i).is_some() {
                return Err(Error::validation_at(
                    w.clone(),
                    "duplicate word in tokenizer vocabulary",
                ));
            }
        }
        Ok(Tokenizer { words, index })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Total id space: specials plus words.
    pub fn n_tokens(&self) -> usize {
        NUM_SPECIAL + self.words.len()
    }

    /// Id for one already-normalized token; OOV maps to the UNK word.
    pub fn word_id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(TOKEN_UNK)
    }

    /// Tokenize and map a text to word ids.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        token_list(text).iter().map(|t| self.word_id(t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builds_sorted_vocabulary_and_encodes() {
        let tok = Tokenizer::build(["What is the umbrella for?", "the dog barks"]);
        assert_eq!(
            tok.words(),
            &["barks", "dog", "for", "is", "the", "umbrella", "what"]
        );
        assert_eq!(tok.n_tokens(), NUM_SPECIAL + 7);
        let ids = tok.encode("The umbrella");
        assert_eq!(ids, vec![tok.word_id("the"), tok.word_id("umbrella")]);
        assert!(ids.iter().all(|&id| id >= NUM_SPECIAL));
    }

    #[test]
    fn oov_tokens_map_to_unk() {
        let tok = Tokenizer::build(["umbrella"]);
        assert_eq!(tok.word_id("xylophone"), TOKEN_UNK);
        assert_eq!(tok.encode("umbrella xylophone!"), vec![NUM_SPECIAL, TOKEN_UNK]);
    }

    #[test]
    fn roundtrips_through_word_list() {
        let tok = Tokenizer::build(["what color is the chair"]);
        let rebuilt = Tokenizer::from_words(tok.words().to_vec()).unwrap();
        assert_eq!(rebuilt, tok);
    }

    #[test]
    fn duplicate_words_are_rejected() {
        let err = Tokenizer::from_words(vec!["dog".into(), "dog".into()]).unwrap_err();
        assert!(err.to_string().contains("dog"));
    }

    #[test]
    fn building_is_input_order_invariant() {
        let a = Tokenizer::build(["dog chair", "umbrella"]);
        let b = Tokenizer::build(["umbrella", "dog chair"]);
        assert_eq!(a, b);
    }
}

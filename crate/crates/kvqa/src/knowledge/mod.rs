//! Commonsense inference generation.
//!
//! A question is rephrased into a declarative phrase, combined with the
//! two most confident object tags into a question–object (QO) phrase,
//! and expanded into natural-language inferences: one per (relation,
//! beam rank) pair, verbalized through per-relation templates and then
//! de-duplicated within each relation.

mod dedup;
mod rephrase;
mod source;

pub use dedup::{dedup, overlap, DEFAULT_DEDUP_THRESHOLD};
pub use rephrase::{rephrase_question, RephraseRules};
pub use source::{
    CacheLine, GenerationBatch, KnowledgeCache, KnowledgeSource, ServiceConfig, StubEntry,
    StubTable,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::ObjectTag;
use crate::text::{token_list, Stopwords};
use crate::{Error, Result};

/// Beam width used when a caller does not override it: each relation
/// contributes at most this many inferences.
pub const DEFAULT_BEAM: usize = 5;

/// Whether a relation talks about a concept (an object) or an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationCategory {
    Concept,
    Event,
}

/// One relation: its name, verbalization template and category. The
/// template must mention `{head}` and `{tail}` exactly once each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationType {
    pub name: String,
    pub template: String,
    pub category: RelationCategory,
}

/// The active, ordered list of relations. Order matters: generation
/// emits inferences in this order and ranking uses it to break ties.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationSet {
    relations: Vec<RelationType>,
}

const DEFAULT_RELATIONS: &str = include_str!("../../data/relations.json");

impl RelationSet {
    /// The default set of 30 relations (15 concept, 15 event).
    pub fn default_set() -> Self {
        Self::parse(DEFAULT_RELATIONS).expect("bundled relation config is valid")
    }

    pub fn parse(json: &str) -> Result<Self> {
        let relations: Vec<RelationType> = serde_json::from_str(json)
            .map_err(|e| Error::Config(format!("relation config: {e}")))?;
        Self::new(relations)
    }

    pub fn new(relations: Vec<RelationType>) -> Result<Self> {
        if relations.is_empty() {
            return Err(Error::Config("relation config is empty".into()));
        }
        for r in &relations {
            let heads = r.template.matches("{head}").count();
            let tails = r.template.matches("{tail}").count();
            if heads != 1 || tails != 1 {
                return Err(Error::Config(format!(
                    "relation {:?} template must contain {{head}} and {{tail}} exactly once, got {} and {}",
                    r.name, heads, tails
                )));
            }
        }
        let mut names: Vec<&str> = relations.iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != relations.len() {
            return Err(Error::Config("duplicate relation name".into()));
        }
        Ok(RelationSet { relations })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let contents = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&contents)
    }

    pub fn relations(&self) -> &[RelationType] {
        &self.relations
    }

    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&RelationType> {
        self.relations.iter().find(|r| r.name == name)
    }

    /// Position of a relation in the configured order; unknown names
    /// sort after all known ones.
    pub fn order_index(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r.name == name)
    }
}

/// A declarative question phrase combined with object tags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QOPhrase {
    pub declarative: String,
    pub tags_used: Vec<String>,
    pub phrase: String,
}

/// Pick the labels fed into the QO phrase: the two most confident tags,
/// ties broken lexicographically, duplicate labels collapsed first.
pub fn select_object_tags(tags: &[ObjectTag]) -> Vec<String> {
    let mut best: Vec<(&str, f64)> = Vec::new();
    for tag in tags {
        match best.iter_mut().find(|(label, _)| *label == tag.label) {
            Some(entry) => entry.1 = entry.1.max(tag.confidence),
            None => best.push((&tag.label, tag.confidence)),
        }
    }
    best.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(b.0))
    });
    best.into_iter().take(2).map(|(l, _)| l.to_string()).collect()
}

/// Join a declarative phrase with up to two tag labels:
/// `"<declarative>, with <a> and <b>"`. With no tags the phrase is the
/// declarative alone.
pub fn build_qo_phrase(declarative: &str, tags: &[String]) -> Result<QOPhrase> {
    if tags.len() > 2 {
        return Err(Error::validation(format!(
            "QO phrase accepts at most two tags, got {}",
            tags.len()
        )));
    }
    let phrase = match tags {
        [] => declarative.to_string(),
        [a] => format!("{declarative}, with {a}"),
        [a, b] => format!("{declarative}, with {a} and {b}"),
        _ => unreachable!(),
    };
    Ok(QOPhrase {
        declarative: declarative.to_string(),
        tags_used: tags.to_vec(),
        phrase,
    })
}

/// Where an inference came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceSource {
    Stub,
    Cache,
    Service,
}

/// One generated commonsense inference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inference {
    pub relation: String,
    /// The QO phrase the inference was generated from.
    pub head: String,
    /// Subject substituted into the template (derived from the head).
    pub subject: String,
    pub tail: String,
    /// 1-based rank within the relation's beam.
    pub beam_rank: u32,
    pub sentence: String,
    pub source: InferenceSource,
}

/// Substitute subject and tail into a relation template and capitalize
/// the first letter. Returns `None` for an empty tail: such inferences
/// carry no content and are dropped by the caller.
pub fn verbalize(relation: &RelationType, head_subject: &str, tail: &str) -> Option<String> {
    let tail = tail.trim();
    if tail.is_empty() {
        return None;
    }
    let sentence = relation
        .template
        .replace("{head}", head_subject.trim())
        .replace("{tail}", tail);
    let mut chars = sentence.chars();
    let first = chars.next()?;
    Some(first.to_uppercase().collect::<String>() + chars.as_str())
}

/// Derive the subject a template talks about from a declarative phrase:
/// the last content word once trailing copulas/prepositions are gone.
/// Sources that match by pattern (the stub) use the matched pattern
/// instead.
pub fn derive_subject(declarative: &str, stopwords: &Stopwords) -> String {
    let mut toks = token_list(declarative);
    while toks.last().is_some_and(|t| {
        matches!(
            t.as_str(),
            "is" | "are" | "was" | "were" | "at" | "by" | "because" | "of" | "with" | "to" | "for"
        )
    }) {
        toks.pop();
    }
    toks.iter()
        .rev()
        .find(|t| !stopwords.contains(t))
        .cloned()
        .or_else(|| toks.last().cloned())
        .unwrap_or_else(|| declarative.trim().to_string())
}

/// Expand a QO phrase into inferences: every relation in configured
/// order contributes up to `beam` tails from the source, each
/// verbalized through the relation's template. Empty tails are skipped;
/// relations the source knows nothing about contribute nothing.
pub fn generate_inferences(
    phrase: &QOPhrase,
    relations: &RelationSet,
    beam: usize,
    source: &mut KnowledgeSource,
) -> Result<Vec<Inference>> {
    source.generate(phrase, relations, beam)
}

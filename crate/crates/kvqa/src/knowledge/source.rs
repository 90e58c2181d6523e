//! Knowledge sources: deterministic stub table, JSONL cache, and an
//! HTTP generation service with write-through caching.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::text::{tokens, Stopwords};
use crate::{Error, Result};

use super::{derive_subject, verbalize, Inference, InferenceSource, QOPhrase, RelationSet};

/// One entry of the stub knowledge table: a head pattern (typically a
/// noun), a relation, and ranked tails. The entry applies to any phrase
/// that contains the pattern's tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubEntry {
    pub pattern: String,
    pub relation: String,
    pub tails: Vec<String>,
}

/// A deterministic, table-driven stand-in for a real knowledge model.
/// Lookup is wildcard-on-contained-nouns: an entry fires when all of
/// its pattern tokens occur in the QO phrase.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubTable {
    pub entries: Vec<StubEntry>,
}

impl StubTable {
    pub fn new(entries: Vec<StubEntry>) -> Self {
        StubTable { entries }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let contents = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact {
                    path: path.to_path_buf(),
                    remedy: "run the synth command or provide a stub knowledge table".into(),
                }
            } else {
                Error::io(path, e)
            }
        })?;
        serde_json::from_str(&contents).map_err(|e| Error::json(path, &e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("stub table serializes");
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    /// Ranked (subject, tail) pairs for one relation, in table order.
    fn ranked_tails(&self, phrase: &str, relation: &str) -> Vec<(String, String)> {
        let phrase_tokens = tokens(phrase);
        let mut out = Vec::new();
        for entry in &self.entries {
            if entry.relation != relation {
                continue;
            }
            let pattern_tokens = tokens(&entry.pattern);
            if pattern_tokens.is_empty() || !pattern_tokens.is_subset(&phrase_tokens) {
                continue;
            }
            for tail in &entry.tails {
                out.push((entry.pattern.clone(), tail.clone()));
            }
        }
        out
    }
}

/// One line of the knowledge cache file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheLine {
    pub phrase: String,
    pub relation: String,
    pub beam_rank: u32,
    pub tail: String,
    pub sentence: String,
}

/// Append-only JSONL cache of generated inferences, keyed by
/// (phrase, relation). Duplicate (phrase, relation, beam_rank) triples
/// are rejected at load time.
#[derive(Debug)]
pub struct KnowledgeCache {
    path: Option<PathBuf>,
    entries: BTreeMap<String, BTreeMap<String, Vec<CacheLine>>>,
}

impl KnowledgeCache {
    /// In-memory cache without a backing file.
    pub fn in_memory() -> Self {
        KnowledgeCache {
            path: None,
            entries: BTreeMap::new(),
        }
    }

    /// Open a cache file for read and append; a missing file starts an
    /// empty cache that will be created on first write.
    pub fn open(path: &Path) -> Result<Self> {
        match std::fs::read_to_string(path) {
            Ok(contents) => Self::from_contents(path, &contents),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(KnowledgeCache {
                path: Some(path.to_path_buf()),
                entries: BTreeMap::new(),
            }),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    /// Open a cache file that must already exist (cache-only source).
    pub fn load_required(path: &Path) -> Result<Self> {
        match std::fs::read_to_string(path) {
            Ok(contents) => Self::from_contents(path, &contents),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                remedy: "run the knowledge command first to populate the cache".into(),
            }),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    fn from_contents(path: &Path, contents: &str) -> Result<Self> {
        let mut cache = KnowledgeCache {
            path: Some(path.to_path_buf()),
            entries: BTreeMap::new(),
        };
        for (idx, line) in contents.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: CacheLine = serde_json::from_str(line).map_err(|e| Error::CacheCorrupt {
                path: path.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            })?;
            let group = cache
                .entries
                .entry(parsed.phrase.clone())
                .or_default()
                .entry(parsed.relation.clone())
                .or_default();
            if group.iter().any(|l| l.beam_rank == parsed.beam_rank) {
                return Err(Error::CacheCorrupt {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    message: format!(
                        "duplicate key (phrase={:?}, relation={:?}, beam_rank={})",
                        parsed.phrase, parsed.relation, parsed.beam_rank
                    ),
                });
            }
            group.push(parsed);
        }
        for relations in cache.entries.values_mut() {
            for group in relations.values_mut() {
                group.sort_by_key(|l| l.beam_rank);
            }
        }
        Ok(cache)
    }

    pub fn contains_phrase(&self, phrase: &str) -> bool {
        self.entries.contains_key(phrase)
    }

    pub fn lookup(&self, phrase: &str, relation: &str) -> Option<&[CacheLine]> {
        self.entries
            .get(phrase)?
            .get(relation)
            .map(Vec::as_slice)
    }

    /// Record freshly generated lines for one phrase, appending to the
    /// backing file when there is one.
    pub fn append_phrase(&mut self, phrase: &str, lines: Vec<CacheLine>) -> Result<()> {
        if let Some(path) = &self.path {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let mut file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            for line in &lines {
                let json = serde_json::to_string(line).expect("cache line serializes");
                writeln!(file, "{json}").map_err(|e| Error::io(path, e))?;
            }
        }
        let phrase_entry = self.entries.entry(phrase.to_string()).or_default();
        for line in lines {
            phrase_entry
                .entry(line.relation.clone())
                .or_default()
                .push(line);
        }
        Ok(())
    }
}

/// Connection settings for the HTTP generation service.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub url: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Upper bound on concurrent requests in batch generation.
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout_secs() -> u64 {
    10
}

fn default_max_in_flight() -> usize {
    4
}

#[derive(Debug, Serialize)]
struct GenerateRequest<'a> {
    phrase: &'a str,
    relations: Vec<&'a str>,
    beam: usize,
}

#[derive(Debug, Deserialize)]
struct GenerateResponse {
    inferences: Vec<ServiceInference>,
}

#[derive(Debug, Deserialize)]
struct ServiceInference {
    relation: String,
    tail: String,
    rank: u32,
}

pub struct ServiceState {
    config: ServiceConfig,
    client: reqwest::blocking::Client,
    cache: KnowledgeCache,
}

impl ServiceState {
    /// POST the phrase, with one retry; errors bubble up so the caller
    /// can degrade.
    fn request(
        &self,
        phrase: &str,
        relations: &RelationSet,
        beam: usize,
    ) -> std::result::Result<GenerateResponse, String> {
        let body = GenerateRequest {
            phrase,
            relations: relations.relations().iter().map(|r| r.name.as_str()).collect(),
            beam,
        };
        let url = format!("{}/generate", self.config.url.trim_end_matches('/'));
        let mut last_error = String::new();
        for _attempt in 0..2 {
            let outcome = self
                .client
                .post(&url)
                .json(&body)
                .send()
                .map_err(|e| e.to_string())
                .and_then(|resp| {
                    if resp.status().is_success() {
                        resp.json::<GenerateResponse>().map_err(|e| e.to_string())
                    } else {
                        Err(format!("service returned HTTP {}", resp.status()))
                    }
                });
            match outcome {
                Ok(resp) => return Ok(resp),
                Err(e) => last_error = e,
            }
        }
        Err(last_error)
    }
}

/// A handle that expands QO phrases into inferences. The three variants
/// share one generation contract: relations in configured order, at
/// most `beam` tails per relation, empty tails dropped.
pub enum KnowledgeSource {
    Stub(StubTable),
    Cache(KnowledgeCache),
    Service(Box<ServiceState>),
}

impl std::fmt::Debug for KnowledgeSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KnowledgeSource::Stub(_) => write!(f, "KnowledgeSource::Stub"),
            KnowledgeSource::Cache(_) => write!(f, "KnowledgeSource::Cache"),
            KnowledgeSource::Service(_) => write!(f, "KnowledgeSource::Service"),
        }
    }
}

/// Inferences for one phrase plus any degradation warnings.
#[derive(Debug, Default)]
pub struct GenerationBatch {
    pub inferences: Vec<Vec<Inference>>,
    pub warnings: Vec<String>,
}

impl KnowledgeSource {
    pub fn stub(table: StubTable) -> Self {
        KnowledgeSource::Stub(table)
    }

    pub fn cache(cache: KnowledgeCache) -> Self {
        KnowledgeSource::Cache(cache)
    }

    pub fn service(config: ServiceConfig, cache: KnowledgeCache) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Service(format!("building HTTP client: {e}")))?;
        Ok(KnowledgeSource::Service(Box::new(ServiceState {
            config,
            client,
            cache,
        })))
    }

    /// Generate inferences for one phrase. Degradations (service
    /// failures, phrases missing from a cache-only source) yield empty
    /// relations and a warning rather than an error.
    pub fn generate(
        &mut self,
        phrase: &QOPhrase,
        relations: &RelationSet,
        beam: usize,
    ) -> Result<Vec<Inference>> {
        let mut batch = self.generate_batch(std::slice::from_ref(phrase), relations, beam)?;
        for warning in &batch.warnings {
            log::warn!("{warning}");
        }
        Ok(batch.inferences.pop().unwrap_or_default())
    }

    /// Generate inferences for many phrases, preserving input order.
    /// The service variant issues up to `max_in_flight` requests
    /// concurrently and caches responses before returning.
    pub fn generate_batch(
        &mut self,
        phrases: &[QOPhrase],
        relations: &RelationSet,
        beam: usize,
    ) -> Result<GenerationBatch> {
        let stopwords = Stopwords::default_list();
        let mut batch = GenerationBatch::default();
        match self {
            KnowledgeSource::Stub(table) => {
                for phrase in phrases {
                    let mut inferences = Vec::new();
                    for relation in relations.relations() {
                        let ranked = table.ranked_tails(&phrase.phrase, &relation.name);
                        push_verbalized(
                            &mut inferences,
                            phrase,
                            relation,
                            InferenceSource::Stub,
                            ranked.into_iter().take(beam),
                        );
                    }
                    batch.inferences.push(inferences);
                }
            }
            KnowledgeSource::Cache(cache) => {
                for phrase in phrases {
                    if !cache.contains_phrase(&phrase.phrase) {
                        batch.warnings.push(format!(
                            "phrase {:?} not present in knowledge cache; no inferences generated",
                            phrase.phrase
                        ));
                        batch.inferences.push(Vec::new());
                        continue;
                    }
                    let subject = derive_subject(&phrase.declarative, &stopwords);
                    let mut inferences = Vec::new();
                    for relation in relations.relations() {
                        let lines = cache.lookup(&phrase.phrase, &relation.name).unwrap_or(&[]);
                        for line in lines.iter().take(beam) {
                            inferences.push(Inference {
                                relation: relation.name.clone(),
                                head: phrase.phrase.clone(),
                                subject: subject.clone(),
                                tail: line.tail.clone(),
                                beam_rank: line.beam_rank,
                                sentence: line.sentence.clone(),
                                source: InferenceSource::Cache,
                            });
                        }
                    }
                    batch.inferences.push(inferences);
                }
            }
            KnowledgeSource::Service(state) => {
                // Resolve cache hits first, then fetch the misses with a
                // bounded worker pool, preserving input order throughout.
                let mut results: Vec<Option<Vec<Inference>>> = vec![None; phrases.len()];
                let mut misses: Vec<usize> = Vec::new();
                for (idx, phrase) in phrases.iter().enumerate() {
                    if state.cache.contains_phrase(&phrase.phrase) {
                        let subject = derive_subject(&phrase.declarative, &stopwords);
                        let mut inferences = Vec::new();
                        for relation in relations.relations() {
                            let lines =
                                state.cache.lookup(&phrase.phrase, &relation.name).unwrap_or(&[]);
                            for line in lines.iter().take(beam) {
                                inferences.push(Inference {
                                    relation: relation.name.clone(),
                                    head: phrase.phrase.clone(),
                                    subject: subject.clone(),
                                    tail: line.tail.clone(),
                                    beam_rank: line.beam_rank,
                                    sentence: line.sentence.clone(),
                                    source: InferenceSource::Cache,
                                });
                            }
                        }
                        results[idx] = Some(inferences);
                    } else {
                        misses.push(idx);
                    }
                }

                let mut responses: Vec<(usize, std::result::Result<GenerateResponse, String>)> =
                    Vec::with_capacity(misses.len());
                let workers = state.config.max_in_flight.max(1);
                for chunk in misses.chunks(workers) {
                    let chunk_responses: Vec<_> = std::thread::scope(|scope| {
                        let handles: Vec<_> = chunk
                            .iter()
                            .map(|&idx| {
                                let state = &*state;
                                let phrase = &phrases[idx];
                                scope.spawn(move || {
                                    (idx, state.request(&phrase.phrase, relations, beam))
                                })
                            })
                            .collect();
                        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
                    });
                    responses.extend(chunk_responses);
                }
                responses.sort_by_key(|(idx, _)| *idx);

                for (idx, outcome) in responses {
                    let phrase = &phrases[idx];
                    match outcome {
                        Ok(response) => {
                            let subject = derive_subject(&phrase.declarative, &stopwords);
                            let mut by_relation: BTreeMap<&str, Vec<&ServiceInference>> =
                                BTreeMap::new();
                            for item in &response.inferences {
                                by_relation.entry(item.relation.as_str()).or_default().push(item);
                            }
                            let mut inferences = Vec::new();
                            let mut cache_lines = Vec::new();
                            for relation in relations.relations() {
                                let mut items = by_relation
                                    .remove(relation.name.as_str())
                                    .unwrap_or_default();
                                items.sort_by_key(|i| i.rank);
                                for item in items.into_iter().take(beam) {
                                    let Some(sentence) =
                                        verbalize(relation, &subject, &item.tail)
                                    else {
                                        continue;
                                    };
                                    cache_lines.push(CacheLine {
                                        phrase: phrase.phrase.clone(),
                                        relation: relation.name.clone(),
                                        beam_rank: item.rank,
                                        tail: item.tail.trim().to_string(),
                                        sentence: sentence.clone(),
                                    });
                                    inferences.push(Inference {
                                        relation: relation.name.clone(),
                                        head: phrase.phrase.clone(),
                                        subject: subject.clone(),
                                        tail: item.tail.trim().to_string(),
                                        beam_rank: item.rank,
                                        sentence,
                                        source: InferenceSource::Service,
                                    });
                                }
                            }
                            if !by_relation.is_empty() {
                                let unknown: Vec<&str> = by_relation.keys().copied().collect();
                                batch.warnings.push(format!(
                                    "service returned unknown relations {unknown:?} for phrase {:?}",
                                    phrase.phrase
                                ));
                            }
                            if !cache_lines.is_empty() {
                                state.cache.append_phrase(&phrase.phrase, cache_lines)?;
                            }
                            results[idx] = Some(inferences);
                        }
                        Err(message) => {
                            batch.warnings.push(format!(
                                "knowledge service failed for phrase {:?} after retry ({message}); \
                                 all relations degraded to empty",
                                phrase.phrase
                            ));
                            results[idx] = Some(Vec::new());
                        }
                    }
                }
                batch.inferences = results.into_iter().map(Option::unwrap_or_default).collect();
                return Ok(batch);
            }
        }
        Ok(batch)
    }
}

/// Shared tail-pair verbalization for sources that rank (subject, tail)
/// pairs themselves (currently the stub).
fn push_verbalized<'a>(
    out: &mut Vec<Inference>,
    phrase: &QOPhrase,
    relation: &super::RelationType,
    source: InferenceSource,
    ranked: impl Iterator<Item = (String, String)> + 'a,
) {
    for (rank0, (subject, tail)) in ranked.enumerate() {
        let Some(sentence) = verbalize(relation, &subject, &tail) else {
            continue;
        };
        out.push(Inference {
            relation: relation.name.clone(),
            head: phrase.phrase.clone(),
            subject,
            tail: tail.trim().to_string(),
            beam_rank: rank0 as u32 + 1,
            sentence,
            source,
        });
    }
}

//! Sentence embedding, inference ranking and embedder augmentation.
//!
//! The embedder is a trainable bag-of-tokens model: a sentence embeds
//! to the unit-normalized mean of its token vectors. Unseen tokens get
//! deterministic pseudo-random unit vectors derived from (seed, token),
//! so the same text always embeds the same way before training;
//! augmentation (see [`augment_train`]) then nudges token vectors so
//! cosine similarity tracks answer-overlap labels.

mod augment;
mod rank;
mod service;

pub use augment::{augment_train, pair_loss, TrainingPair, DEFAULT_AUGMENT_EPOCHS};
pub use rank::{cosine, label_similarity, rank_and_select, ScoredInference};
pub use service::EmbedServiceClient;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::norm;
use crate::text::token_list;
use crate::{Error, Result};

/// Default embedding dimension.
pub const DEFAULT_EMBED_DIM: usize = 64;

/// A sentence embedding. `normalized` is false only for degenerate
/// inputs (no tokens, or a zero mean vector), which rank last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn zero(dim: usize) -> Self {
        EmbeddingVector {
            values: vec![0.0; dim],
            normalized: false,
        }
    }
}

/// FNV-1a hash; stable across platforms and runs, unlike the standard
/// library's default hasher.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Trainable bag-of-tokens sentence embedder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedder {
    pub dim: usize,
    pub seed: u64,
    pub trained: bool,
    /// Token vectors materialized (and possibly adjusted) by training.
    /// Tokens absent here fall back to their hashed initialization.
    pub tokens: BTreeMap<String, Vec<f64>>,
}

impl Embedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Embedder {
            dim,
            seed,
            trained: false,
            tokens: BTreeMap::new(),
        }
    }

    /// Deterministic pseudo-random unit vector for an unseen token.
    fn hashed_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()) ^ self.seed);
        loop {
            let v: Vec<f64> = (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = norm(&v);
            if n > 1e-6 {
                return v.iter().map(|x| x / n).collect();
            }
        }
    }

    /// Current vector for a token: trained if available, hashed otherwise.
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        match self.tokens.get(token) {
            Some(v) => v.clone(),
            None => self.hashed_vector(token),
        }
    }

    /// Ensure a token has a materialized (trainable) vector.
    pub(crate) fn materialize(&mut self, token: &str) {
        if !self.tokens.contains_key(token) {
            let v = self.hashed_vector(token);
            self.tokens.insert(token.to_string(), v);
        }
    }

    /// Unnormalized mean of token vectors; `None` when there are no
    /// tokens. Duplicated tokens count once per occurrence.
    pub(crate) fn mean_vector(&self, text: &str) -> Option<Vec<f64>> {
        let toks = token_list(text);
        if toks.is_empty() {
            return None;
        }
        let mut mean = vec![0.0; self.dim];
        for tok in &toks {
            let v = self.token_vector(tok);
            for (m, x) in mean.iter_mut().zip(&v) {
                *m += x;
            }
        }
        let scale = 1.0 / toks.len() as f64;
        for m in &mut mean {
            *m *= scale;
        }
        Some(mean)
    }

    /// Embed a sentence: unit-normalized mean of token vectors. Inputs
    /// without tokens (or with a vanishing mean) yield a zero vector
    /// flagged as unnormalized.
    pub fn embed(&self, text: &str) -> EmbeddingVector {
        let Some(mean) = self.mean_vector(text) else {
            return EmbeddingVector::zero(self.dim);
        };
        let n = norm(&mean);
        if n <= 1e-12 {
            return EmbeddingVector::zero(self.dim);
        }
        EmbeddingVector {
            values: mean.iter().map(|x| x / n).collect(),
            normalized: true,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).expect("embedder serializes");
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let contents = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact {
                    path: path.to_path_buf(),
                    remedy: "run the select command first to produce the embedder".into(),
                }
            } else {
                Error::io(path, e)
            }
        })?;
        let embedder: Embedder =
            serde_json::from_str(&contents).map_err(|e| Error::json(path, &e))?;
        if embedder.dim == 0 {
            return Err(Error::validation("embedder dimension must be positive"));
        }
        for (token, v) in &embedder.tokens {
            if v.len() != embedder.dim {
                return Err(Error::validation_at(
                    token.clone(),
                    format!("token vector has length {}, expected {}", v.len(), embedder.dim),
                ));
            }
        }
        Ok(embedder)
    }
}

/// Where sentence embeddings come from: the local trainable embedder or
/// a remote service.
pub enum EmbeddingBackend {
    Local(Embedder),
    Service(EmbedServiceClient),
}

impl EmbeddingBackend {
    pub fn embed_all(&mut self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        match self {
            EmbeddingBackend::Local(embedder) => {
                Ok(texts.iter().map(|t| embedder.embed(t)).collect())
            }
            EmbeddingBackend::Service(client) => client.embed(texts),
        }
    }
}

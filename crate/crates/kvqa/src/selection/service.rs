//! Client for an external sentence-embedding service.
//!
//! The service speaks a one-endpoint JSON protocol: POST `{url}/embed`
//! with `{"texts": [...]}` and get back `{"vectors": [[...], ...]}`,
//! one vector per input text in order. Vectors are unit-normalized
//! locally so downstream ranking sees the same shape of data whether
//! embeddings come from here or the local embedder.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::linalg::norm;
use crate::selection::EmbeddingVector;
use crate::{Error, Result};

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

pub struct EmbedServiceClient {
    url: String,
    client: reqwest::blocking::Client,
    /// Vector dimension, discovered from the first non-empty response
    /// and enforced afterwards.
    dim: Option<usize>,
}

impl EmbedServiceClient {
    pub fn new(url: &str, timeout_secs: u64) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(timeout_secs))
            .build()
            .map_err(|e| Error::Service(format!("failed to build http client: {e}")))?;
        Ok(EmbedServiceClient {
            url: url.trim_end_matches('/').to_string(),
            client,
            dim: None,
        })
    }

    fn request(&self, texts: &[String]) -> Result<EmbedResponse> {
        let endpoint = format!("{}/embed", self.url);
        let mut last_error = String::new();
        // One retry: transient failures are common enough to paper over,
        // anything persistent should surface quickly.
        for _attempt in 0..2 {
            let sent = self
                .client
                .post(&endpoint)
                .json(&EmbedRequest { texts })
                .send();
            match sent {
                Ok(response) => {
                    if !response.status().is_success() {
                        last_error = format!("{endpoint} returned {}", response.status());
                        continue;
                    }
                    match response.json::<EmbedResponse>() {
                        Ok(body) => return Ok(body),
                        Err(e) => {
                            last_error = format!("{endpoint} sent an unparseable body: {e}");
                            continue;
                        }
                    }
                }
                Err(e) => {
                    last_error = format!("{endpoint} request failed: {e}");
                    continue;
                }
            }
        }
        Err(Error::Service(last_error))
    }

    /// Embed a batch of texts, in order. The embedding dimension is
    /// pinned by the first response; later responses that disagree (or
    /// rows within one response that disagree) are an error.
    pub fn embed(&mut self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = self.request(texts)?;
        if body.vectors.len() != texts.len() {
            return Err(Error::Service(format!(
                "embedding service returned {} vectors for {} texts",
                body.vectors.len(),
                texts.len()
            )));
        }
        let mut out = Vec::with_capacity(body.vectors.len());
        for values in body.vectors {
            let dim = match self.dim {
                Some(d) => d,
                None => {
                    self.dim = Some(values.len());
                    values.len()
                }
            };
            if values.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    actual: values.len(),
                });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Service(
                    "embedding service returned a non-finite vector".into(),
                ));
            }
            let n = norm(&values);
            if n <= 1e-12 {
                out.push(EmbeddingVector {
                    values,
                    normalized: false,
                });
            } else {
                out.push(EmbeddingVector {
                    values: values.iter().map(|v| v / n).collect(),
                    normalized: true,
                });
            }
        }
        Ok(out)
    }

    /// Dimension reported by the service, once at least one non-empty
    /// batch has been embedded.
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }
}

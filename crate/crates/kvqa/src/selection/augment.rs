//! Embedder augmentation: fit token vectors so that the cosine between
//! a question and an inference sentence tracks a weak relevance label.

use crate::linalg::{dot, norm};
use crate::selection::Embedder;
use crate::text::token_list;
use crate::Result;

/// One training example: a question, an inference sentence and the
/// answer-overlap label in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub question: String,
    pub sentence: String,
    pub label: f64,
}

/// Default number of augmentation passes over the pairs.
pub const DEFAULT_AUGMENT_EPOCHS: usize = 2;

/// Squared-error loss between cosine similarity and label for a single
/// pair under the current embedder. Pairs where either side has no
/// tokens (or a vanishing mean vector) contribute no loss.
pub fn pair_loss(embedder: &Embedder, pair: &TrainingPair) -> f64 {
    let (Some(a), Some(b)) = (
        embedder.mean_vector(&pair.question),
        embedder.mean_vector(&pair.sentence),
    ) else {
        return 0.0;
    };
    let (na, nb) = (norm(&a), norm(&b));
    if na <= 1e-12 || nb <= 1e-12 {
        return 0.0;
    }
    let cos = dot(&a, &b) / (na * nb);
    (cos - pair.label) * (cos - pair.label)
}

/// Accumulate the gradient of [`pair_loss`] with respect to every token
/// vector appearing in the pair, into `grads` (token -> d loss / d vec).
/// Returns false when the pair is degenerate and contributes nothing.
fn accumulate_pair_gradient(
    embedder: &Embedder,
    pair: &TrainingPair,
    grads: &mut std::collections::BTreeMap<String, Vec<f64>>,
) -> bool {
    let toks_a = token_list(&pair.question);
    let toks_b = token_list(&pair.sentence);
    if toks_a.is_empty() || toks_b.is_empty() {
        return false;
    }
    let a = embedder.mean_vector(&pair.question).expect("nonempty");
    let b = embedder.mean_vector(&pair.sentence).expect("nonempty");
    let (na, nb) = (norm(&a), norm(&b));
    if na <= 1e-12 || nb <= 1e-12 {
        return false;
    }
    let cos = dot(&a, &b) / (na * nb);
    let dcos = 2.0 * (cos - pair.label);

    // d cos / d a = b / (|a||b|) - cos * a / |a|^2, and symmetrically
    // for b. Each token vector enters the mean with weight 1/m per
    // occurrence.
    let da: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(&ai, &bi)| dcos * (bi / (na * nb) - cos * ai / (na * na)))
        .collect();
    let db: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(&ai, &bi)| dcos * (ai / (na * nb) - cos * bi / (nb * nb)))
        .collect();

    let wa = 1.0 / toks_a.len() as f64;
    for tok in &toks_a {
        let g = grads
            .entry(tok.clone())
            .or_insert_with(|| vec![0.0; embedder.dim]);
        for (gi, di) in g.iter_mut().zip(&da) {
            *gi += wa * di;
        }
    }
    let wb = 1.0 / toks_b.len() as f64;
    for tok in &toks_b {
        let g = grads
            .entry(tok.clone())
            .or_insert_with(|| vec![0.0; embedder.dim]);
        for (gi, di) in g.iter_mut().zip(&db) {
            *gi += wb * di;
        }
    }
    true
}

/// Train the embedder on weakly labeled (question, sentence) pairs by
/// stochastic gradient descent on squared cosine-vs-label error, one
/// pair at a time in the given order. With no pairs this is a warning
/// no-op; with `epochs == 0` the embedder is untouched apart from the
/// trained flag staying false.
pub fn augment_train(
    embedder: &mut Embedder,
    pairs: &[TrainingPair],
    epochs: usize,
    learning_rate: f64,
) -> Result<()> {
    if pairs.is_empty() {
        log::warn!("augmentation requested with no training pairs; embedder left untouched");
        return Ok(());
    }
    if epochs == 0 {
        return Ok(());
    }
    // Materialize every token up front so updates apply to concrete
    // vectors rather than the hashed fallback.
    for pair in pairs {
        for tok in token_list(&pair.question) {
            embedder.materialize(&tok);
        }
        for tok in token_list(&pair.sentence) {
            embedder.materialize(&tok);
        }
    }
    for _ in 0..epochs {
        for pair in pairs {
            let mut grads = std::collections::BTreeMap::new();
            if !accumulate_pair_gradient(embedder, pair, &mut grads) {
                continue;
            }
            for (tok, g) in grads {
                let v = embedder.tokens.get_mut(&tok).expect("materialized");
                for (vi, gi) in v.iter_mut().zip(&g) {
                    *vi -= learning_rate * gi;
                }
            }
        }
    }
    embedder.trained = true;
    Ok(())
}

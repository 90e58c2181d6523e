//! Ranking generated inferences against a question embedding, and the
//! answer-overlap labels used to train the embedder.

use std::cmp::Ordering;

use crate::corpus::AnswerCount;
use crate::knowledge::{Inference, RelationSet};
use crate::linalg::dot;
use crate::selection::EmbeddingVector;
use crate::text::{tokens, Stopwords};
use crate::{Error, Result};

/// An inference with its similarity score to the question.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScoredInference {
    pub inference: Inference,
    pub score: f64,
}

/// Cosine similarity of two embeddings. Zero (unnormalized) vectors
/// have no direction, so any pairing involving one scores 0.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    if !a.normalized || !b.normalized {
        return Ok(0.0);
    }
    Ok(dot(&a.values, &b.values))
}

/// Rank candidate inferences by cosine similarity to the question and
/// keep the top `k`.
///
/// The order is a total one so results never depend on input
/// permutation: descending score, then relation position in the
/// relation set, then beam rank. Degenerate (zero-vector) embeddings
/// always sort last regardless of relation or rank.
pub fn rank_and_select(
    question: &EmbeddingVector,
    candidates: &[(Inference, EmbeddingVector)],
    k: usize,
    relations: &RelationSet,
) -> Result<Vec<ScoredInference>> {
    let mut scored = Vec::with_capacity(candidates.len());
    for (inference, embedding) in candidates {
        let relation_index = relations.order_index(&inference.relation).ok_or_else(|| {
            Error::validation_at(
                inference.relation.clone(),
                "inference relation is not in the relation set",
            )
        })?;
        let degenerate = !embedding.normalized;
        let score = cosine(question, embedding)?;
        scored.push((degenerate, score, relation_index, inference));
    }
    scored.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then_with(|| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal))
            .then_with(|| a.2.cmp(&b.2))
            .then_with(|| a.3.beam_rank.cmp(&b.3.beam_rank))
    });
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(_, score, _, inference)| ScoredInference {
            inference: inference.clone(),
            score,
        })
        .collect())
}

/// Weak relevance label for an inference sentence: the fraction of
/// annotator weight whose answer is fully covered by the sentence.
///
/// An answer counts as covered when it has at least one content token
/// and every content token appears in the sentence's token set. The
/// denominator is the total annotator count over all answers.
pub fn label_similarity(
    sentence: &str,
    answers: &[AnswerCount],
    stopwords: &Stopwords,
) -> f64 {
    let total: u32 = answers.iter().map(|a| a.count).sum();
    if total == 0 {
        return 0.0;
    }
    let sentence_tokens = tokens(sentence);
    let mut matched = 0u32;
    for answer in answers {
        let content = stopwords.content_tokens(&answer.answer);
        if !content.is_empty() && content.iter().all(|t| sentence_tokens.contains(t)) {
            matched += answer.count;
        }
    }
    f64::from(matched) / f64::from(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::{InferenceSource, RelationSet};
    use crate::selection::Embedder;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn relations() -> RelationSet {
        RelationSet::default_set()
    }

    fn inference(relation: &str, beam_rank: u32, sentence: &str) -> Inference {
        Inference {
            relation: relation.to_string(),
            head: "the umbrella".to_string(),
            subject: "umbrella".to_string(),
            tail: sentence.to_string(),
            beam_rank,
            sentence: sentence.to_string(),
            source: InferenceSource::Stub,
        }
    }

    fn counts(pairs: &[(&str, u32)]) -> Vec<AnswerCount> {
        pairs
            .iter()
            .map(|(a, c)| AnswerCount {
                answer: a.to_string(),
                count: *c,
            })
            .collect()
    }

    #[test]
    fn selects_by_descending_cosine() {
        let embedder = Embedder::new(64, 11);
        let rels = relations();
        let question = embedder.embed("where might you find an umbrella");
        let candidates: Vec<_> = [
            ("AtLocation", 0, "you are likely to find umbrella at store"),
            ("UsedFor", 0, "completely unrelated words about xylophones"),
            ("CapableOf", 0, "find umbrella you might where"),
        ]
        .iter()
        .map(|(r, b, s)| {
            let inf = inference(r, *b, s);
            let emb = embedder.embed(s);
            (inf, emb)
        })
        .collect();
        let picked = rank_and_select(&question, &candidates, 2, &rels).unwrap();
        assert_eq!(picked.len(), 2);
        // The token-identical rewrite shares every token with the question,
        // so it must outrank the unrelated sentence.
        assert_eq!(picked[0].inference.relation, "CapableOf");
        assert!(picked[0].score > picked[1].score);
        assert!(picked
            .iter()
            .all(|s| s.inference.relation != "UsedFor" || s.score < picked[0].score));
    }

    #[test]
    fn ties_break_by_relation_order_then_beam_rank() {
        let rels = relations();
        let question = EmbeddingVector {
            values: {
                let mut v = vec![0.0; 8];
                v[0] = 1.0;
                v
            },
            normalized: true,
        };
        let same = EmbeddingVector {
            values: {
                let mut v = vec![0.0; 8];
                v[0] = 1.0;
                v
            },
            normalized: true,
        };
        // All four candidates have identical cosine; order must come from
        // the relation set order (AtLocation before UsedFor in the default
        // set) and then beam rank.
        let candidates = vec![
            (inference("UsedFor", 1, "b"), same.clone()),
            (inference("AtLocation", 1, "d"), same.clone()),
            (inference("UsedFor", 0, "a"), same.clone()),
            (inference("AtLocation", 0, "c"), same.clone()),
        ];
        let picked = rank_and_select(&question, &candidates, 4, &rels).unwrap();
        let order: Vec<_> = picked
            .iter()
            .map(|s| (s.inference.relation.as_str(), s.inference.beam_rank))
            .collect();
        assert_eq!(
            order,
            vec![
                ("AtLocation", 0),
                ("AtLocation", 1),
                ("UsedFor", 0),
                ("UsedFor", 1)
            ]
        );
    }

    #[test]
    fn zero_vector_candidates_rank_last() {
        let embedder = Embedder::new(64, 11);
        let rels = relations();
        let question = embedder.embed("where might you find an umbrella");
        let candidates = vec![
            // AtLocation comes first in the relation set, but its embedding
            // is degenerate, so it must fall behind every healthy candidate
            // even ones with negative cosine.
            (inference("AtLocation", 0, ""), EmbeddingVector::zero(64)),
            (
                inference("UsedFor", 0, "totally different tokens entirely"),
                embedder.embed("totally different tokens entirely"),
            ),
        ];
        let picked = rank_and_select(&question, &candidates, 2, &rels).unwrap();
        assert_eq!(picked[0].inference.relation, "UsedFor");
        assert_eq!(picked[1].inference.relation, "AtLocation");
        assert_eq!(picked[1].score, 0.0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let rels = relations();
        let question = Embedder::new(64, 11).embed("umbrella");
        let candidates = vec![(
            inference("AtLocation", 0, "store"),
            Embedder::new(32, 11).embed("store"),
        )];
        let err = rank_and_select(&question, &candidates, 1, &rels).unwrap_err();
        assert!(matches!(
            err,
            crate::Error::Dimension {
                expected: 64,
                actual: 32
            }
        ));
    }

    #[test]
    fn selection_matches_brute_force_oracle() {
        // Independent oracle: score every candidate, sort with a sort key
        // built the straightforward way, compare the full top-k slate.
        let rels = relations();
        let names: Vec<String> = rels.relations().iter().map(|r| r.name.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let vocab = [
            "umbrella", "store", "rain", "dog", "chair", "blocking", "river", "kitchen",
            "walking", "cloud",
        ];
        for case in 0..200 {
            let embedder = Embedder::new(16, 1000 + case);
            let qlen = rng.gen_range(1..5);
            let question_text: Vec<&str> =
                (0..qlen).map(|_| vocab[rng.gen_range(0..vocab.len())]).collect();
            let question = embedder.embed(&question_text.join(" "));
            let n = rng.gen_range(1..12);
            let mut candidates = Vec::new();
            for i in 0..n {
                let relation = names[rng.gen_range(0..names.len())].clone();
                let beam_rank: u32 = rng.gen_range(0..5);
                let slen = rng.gen_range(0..4);
                let sentence: Vec<&str> =
                    (0..slen).map(|_| vocab[rng.gen_range(0..vocab.len())]).collect();
                let sentence = sentence.join(" ");
                let emb = embedder.embed(&sentence);
                let mut inf = inference(&relation, beam_rank, &sentence);
                inf.sentence = format!("{sentence} #{i}");
                candidates.push((inf, emb));
            }
            let k = rng.gen_range(0..=candidates.len());
            let picked = rank_and_select(&question, &candidates, k, &rels).unwrap();

            let mut oracle: Vec<_> = candidates
                .iter()
                .map(|(inf, emb)| {
                    let score = if question.normalized && emb.normalized {
                        dot(&question.values, &emb.values)
                    } else {
                        0.0
                    };
                    let degenerate = usize::from(!emb.normalized);
                    (degenerate, -score, rels.order_index(&inf.relation).unwrap(), inf.beam_rank, inf)
                })
                .collect();
            oracle.sort_by(|a, b| {
                a.0.cmp(&b.0)
                    .then_with(|| a.1.partial_cmp(&b.1).unwrap())
                    .then_with(|| a.2.cmp(&b.2))
                    .then_with(|| a.3.cmp(&b.3))
            });
            let expected: Vec<&str> = oracle
                .iter()
                .take(k)
                .map(|(_, _, _, _, inf)| inf.sentence.as_str())
                .collect();
            let got: Vec<&str> = picked.iter().map(|s| s.inference.sentence.as_str()).collect();
            assert_eq!(got, expected, "case {case}");
        }
    }

    #[test]
    fn selection_is_permutation_invariant() {
        let embedder = Embedder::new(32, 77);
        let rels = relations();
        let question = embedder.embed("what is the umbrella used for");
        let sentences = [
            ("UsedFor", 0, "umbrella is used for blocking rain"),
            ("AtLocation", 0, "you are likely to find umbrella at store"),
            ("AtLocation", 1, "you are likely to find umbrella at beach"),
            ("CapableOf", 2, "umbrella is capable of folding"),
            ("IsA", 0, ""),
        ];
        let candidates: Vec<_> = sentences
            .iter()
            .map(|(r, b, s)| (inference(r, *b, s), embedder.embed(s)))
            .collect();
        let forward = rank_and_select(&question, &candidates, 3, &rels).unwrap();
        let mut reversed = candidates.clone();
        reversed.reverse();
        let backward = rank_and_select(&question, &reversed, 3, &rels).unwrap();
        assert_eq!(forward, backward);
    }

    #[test]
    fn label_similarity_matches_hand_computed_fraction() {
        let stop = Stopwords::default_list();
        let sentence = "You are likely to find umbrella at store";
        let answers = counts(&[("store", 7), ("shop", 3)]);
        let sim = label_similarity(sentence, &answers, &stop);
        assert!((sim - 0.7).abs() < 1e-12);
    }

    #[test]
    fn label_similarity_requires_every_content_token() {
        let stop = Stopwords::default_list();
        let answers = counts(&[("grocery store", 5), ("store", 5)]);
        let sim = label_similarity("umbrella at the store", &answers, &stop);
        assert!((sim - 0.5).abs() < 1e-12, "multi-word answer only half covered");
    }

    #[test]
    fn stopword_only_answers_never_match() {
        let stop = Stopwords::default_list();
        let answers = counts(&[("the", 6), ("store", 4)]);
        let sim = label_similarity("the store is the place", &answers, &stop);
        assert!((sim - 0.4).abs() < 1e-12);
    }

    #[test]
    fn label_similarity_handles_empty_inputs() {
        let stop = Stopwords::default_list();
        assert_eq!(label_similarity("anything", &[], &stop), 0.0);
        let answers = counts(&[("store", 3)]);
        assert_eq!(label_similarity("", &answers, &stop), 0.0);
    }
}

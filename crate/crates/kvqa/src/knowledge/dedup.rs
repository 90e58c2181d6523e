//! Near-duplicate removal among inferences of the same relation.

use std::collections::BTreeSet;

use crate::text::tokens;

use super::Inference;

/// Overlap threshold above which a candidate counts as a duplicate.
pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.7;

/// Directed token overlap: the fraction of the candidate's tokens that
/// also occur in the kept sentence. Tokens are lowercased words with
/// punctuation stripped. An empty candidate overlaps nothing.
pub fn overlap(candidate: &str, kept: &str) -> f64 {
    let candidate_tokens = tokens(candidate);
    if candidate_tokens.is_empty() {
        return 0.0;
    }
    let kept_tokens = tokens(kept);
    let shared = candidate_tokens.intersection(&kept_tokens).count();
    shared as f64 / candidate_tokens.len() as f64
}

/// Drop inferences that overlap a kept inference of the same relation
/// by more than `threshold`.
///
/// Candidates are scanned in (relation, beam rank) order — relations in
/// order of first appearance — so lower beam ranks win; the surviving
/// list preserves the input order. Inferences of different relations
/// never suppress each other.
pub fn dedup(inferences: &[Inference], threshold: f64) -> Vec<Inference> {
    // Scan order: group by relation (first-appearance order), then beam
    // rank ascending, with input position as the final stable key.
    let mut relation_order: Vec<&str> = Vec::new();
    for inf in inferences {
        if !relation_order.contains(&inf.relation.as_str()) {
            relation_order.push(&inf.relation);
        }
    }
    let mut order: Vec<usize> = (0..inferences.len()).collect();
    order.sort_by_key(|&i| {
        let inf = &inferences[i];
        (
            relation_order
                .iter()
                .position(|r| *r == inf.relation)
                .expect("relation seen above"),
            inf.beam_rank,
            i,
        )
    });

    let mut kept = vec![false; inferences.len()];
    for &i in &order {
        let candidate = &inferences[i];
        let candidate_tokens: BTreeSet<String> = tokens(&candidate.sentence);
        let duplicate = candidate_tokens.is_empty()
            || kept.iter().enumerate().any(|(j, &keep)| {
                if !keep || inferences[j].relation != candidate.relation {
                    return false;
                }
                let kept_tokens = tokens(&inferences[j].sentence);
                let shared = candidate_tokens.intersection(&kept_tokens).count();
                shared as f64 / candidate_tokens.len() as f64 > threshold
            });
        if !candidate_tokens.is_empty() && !duplicate {
            kept[i] = true;
        }
    }

    inferences
        .iter()
        .enumerate()
        .filter(|(i, _)| kept[*i])
        .map(|(_, inf)| inf.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::InferenceSource;

    fn inference(relation: &str, beam_rank: u32, sentence: &str) -> Inference {
        Inference {
            relation: relation.into(),
            head: "head".into(),
            subject: "subject".into(),
            tail: "tail".into(),
            beam_rank,
            sentence: sentence.into(),
            source: InferenceSource::Stub,
        }
    }

    #[test]
    fn overlap_is_candidate_normalized() {
        // Candidate has 4 tokens, 3 of them shared: 0.75.
        let o = overlap("alpha beta gamma delta", "alpha beta gamma epsilon zeta");
        assert!((o - 0.75).abs() < 1e-12);
        // Not symmetric: swapped, 3 of 5 tokens are shared.
        let o = overlap("alpha beta gamma epsilon zeta", "alpha beta gamma delta");
        assert!((o - 0.6).abs() < 1e-12);
        assert_eq!(overlap("", "anything"), 0.0);
    }

    #[test]
    fn identical_same_relation_sentences_collapse() {
        let input = vec![
            inference("AtLocation", 1, "You are likely to find umbrella at store"),
            inference("AtLocation", 2, "You are likely to find umbrella at store"),
        ];
        let out = dedup(&input, 0.7);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].beam_rank, 1);
    }

    #[test]
    fn cross_relation_duplicates_survive() {
        let input = vec![
            inference("AtLocation", 1, "You are likely to find umbrella at store"),
            inference("ObjectUse", 1, "You are likely to find umbrella at store"),
        ];
        let out = dedup(&input, 0.7);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn seventy_five_percent_overlap_is_dropped() {
        let input = vec![
            inference("UsedFor", 1, "alpha beta gamma epsilon zeta"),
            inference("UsedFor", 2, "alpha beta gamma delta"),
        ];
        let out = dedup(&input, 0.7);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].sentence, "alpha beta gamma epsilon zeta");
    }

    #[test]
    fn lower_beam_rank_wins_regardless_of_input_position() {
        // The rank-1 sentence arrives later but still suppresses rank 2.
        let input = vec![
            inference("UsedFor", 2, "alpha beta gamma delta"),
            inference("UsedFor", 1, "alpha beta gamma delta epsilon"),
        ];
        let out = dedup(&input, 0.7);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].beam_rank, 1);
    }

    #[test]
    fn dedup_is_idempotent() {
        let input = vec![
            inference("AtLocation", 1, "You are likely to find umbrella at store"),
            inference("AtLocation", 2, "You are likely to find umbrella at the store today"),
            inference("AtLocation", 3, "You are likely to find umbrella at closet"),
            inference("UsedFor", 1, "Umbrella is used for blocking rain"),
            inference("UsedFor", 2, "Umbrella is used for blocking rain"),
        ];
        let once = dedup(&input, 0.7);
        let twice = dedup(&once, 0.7);
        assert_eq!(once, twice);
    }

    #[test]
    fn survivors_preserve_input_order() {
        let input = vec![
            inference("UsedFor", 1, "one two three"),
            inference("AtLocation", 1, "four five six"),
            inference("UsedFor", 2, "seven eight nine"),
        ];
        let out = dedup(&input, 0.7);
        let sentences: Vec<&str> = out.iter().map(|i| i.sentence.as_str()).collect();
        assert_eq!(sentences, vec!["one two three", "four five six", "seven eight nine"]);
    }

    #[test]
    fn threshold_one_keeps_everything_distinct() {
        let input = vec![
            inference("UsedFor", 1, "alpha beta gamma"),
            inference("UsedFor", 2, "alpha beta"),
        ];
        // The rank-2 candidate is fully contained in the kept sentence
        // (overlap exactly 1.0), but 1.0 is not > 1.0, so it stays.
        let out = dedup(&input, 1.0);
        assert_eq!(out.len(), 2);
        // At the default threshold the same candidate is dropped.
        assert_eq!(dedup(&input, 0.7).len(), 1);
    }
}

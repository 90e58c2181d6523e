//! Weak attention supervision: labels built from answer overlap, and
//! the cross-entropy between those labels and the attention weights.

use crate::corpus::AnswerCount;
use crate::knowledge::Inference;
use crate::text::{tokens, Stopwords};
use crate::{Error, Result};

/// Raw label mass for a slot that should be attended to.
const STRONG: f64 = 0.8;
/// Raw label mass for every other slot.
const WEAK: f64 = 0.05;
/// Attention probabilities are clamped to this floor inside the log.
pub const LABEL_FLOOR: f64 = 1e-12;

/// True when the sentence contains at least one content token of at
/// least one ground-truth answer. Stopword-only answers can never
/// qualify.
pub fn answer_bearing(sentence: &str, answers: &[AnswerCount], stopwords: &Stopwords) -> bool {
    let sentence_tokens = tokens(sentence);
    answers.iter().any(|a| {
        stopwords
            .content_tokens(&a.answer)
            .iter()
            .any(|t| sentence_tokens.contains(t))
    })
}

/// The normalization arithmetic behind [`weak_labels`]: candidates
/// flagged true get the strong mass, everything else the weak mass,
/// and the appended question slot gets the strong mass exactly when no
/// candidate qualifies. The raw masses are then normalized to sum 1.
pub fn label_distribution(answer_bearing: &[bool]) -> Vec<f64> {
    let mut raw: Vec<f64> = answer_bearing
        .iter()
        .map(|&b| if b { STRONG } else { WEAK })
        .collect();
    let any = answer_bearing.iter().any(|&b| b);
    raw.push(if any { WEAK } else { STRONG });
    let total: f64 = raw.iter().sum();
    raw.iter_mut().for_each(|v| *v /= total);
    raw
}

/// Build the attention label vector for the selected inferences plus
/// the question slot, length `k + 1`.
pub fn weak_labels(
    selected: &[Inference],
    answers: &[AnswerCount],
    stopwords: &Stopwords,
) -> Vec<f64> {
    let bearing: Vec<bool> = selected
        .iter()
        .map(|inf| answer_bearing(&inf.sentence, answers, stopwords))
        .collect();
    label_distribution(&bearing)
}

/// Cross entropy `-sum(label * ln(attention))` with the attention
/// probabilities clamped away from zero.
pub fn attention_loss(attention: &[f64], labels: &[f64]) -> Result<f64> {
    if attention.len() != labels.len() {
        return Err(Error::Dimension {
            expected: labels.len(),
            actual: attention.len(),
        });
    }
    Ok(labels
        .iter()
        .zip(attention)
        .map(|(&y, &p)| {
            // Clamp underflow without `f64::max`, which would replace a
            // NaN probability by the floor and mask a diverged model.
            let clamped = if p < LABEL_FLOOR { LABEL_FLOOR } else { p };
            -y * clamped.ln()
        })
        .sum())
}

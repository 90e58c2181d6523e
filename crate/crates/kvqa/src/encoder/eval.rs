//! Greedy evaluation, report building and per-question analysis.
//!
//! Prediction and scoring are split so a report can be rebuilt from a
//! saved prediction file: scores are always recomputed from the
//! prediction string and the gold answers, which makes the live and
//! replayed reports identical.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    subset_filter, vqa_accuracy, AnswerCount, AnswerVocabulary, QuestionRecord, WordLists,
};
use crate::encoder::model::EncoderParameters;
use crate::encoder::train::{argmax, example_loss, EncoderExample};
use crate::encoder::FusionMode;
use crate::{Error, Result};

/// One line of the prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub question_id: String,
    pub prediction: String,
    pub score: f64,
}

/// Accuracy over one group of questions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStat {
    pub accuracy: f64,
    pub count: usize,
}

/// Commonsense-subset breakdown. Buckets that would be empty are
/// absent rather than reported as zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retained: Option<BucketStat>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub excluded: BTreeMap<String, BucketStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subset: Option<SubsetReport>,
}

/// Greedy (argmax) predictions with their scores.
pub fn predict(
    params: &EncoderParameters,
    vocab: &AnswerVocabulary,
    examples: &[EncoderExample],
) -> Result<Vec<PredictionRow>> {
    if vocab.len() != params.n_answers {
        return Err(Error::validation(
            "answer vocabulary does not match the checkpoint's classifier size",
        ));
    }
    examples
        .iter()
        .map(|ex| {
            let eval = example_loss(params, ex)?;
            let prediction = vocab.entries[argmax(&eval.logits)].clone();
            let score = vqa_accuracy(&prediction, &ex.answers);
            Ok(PredictionRow {
                question_id: ex.question_id.clone(),
                prediction,
                score,
            })
        })
        .collect()
}

fn bucket(scores: &[f64]) -> BucketStat {
    BucketStat {
        accuracy: scores.iter().sum::<f64>() / scores.len() as f64,
        count: scores.len(),
    }
}

/// Score predictions against gold records, optionally with the
/// commonsense-subset breakdown. Every prediction must refer to a
/// known question id; scores are recomputed here so a report built
/// from a saved prediction file matches the live one exactly.
pub fn evaluate(
    predictions: &[PredictionRow],
    records: &[QuestionRecord],
    subset: Option<&WordLists>,
) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::validation("no predictions to evaluate"));
    }
    let by_id: BTreeMap<&str, &QuestionRecord> = records
        .iter()
        .map(|r| (r.question_id.as_str(), r))
        .collect();
    let mut overall = Vec::with_capacity(predictions.len());
    let mut retained = Vec::new();
    let mut excluded: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for row in predictions {
        let record = by_id.get(row.question_id.as_str()).ok_or_else(|| {
            Error::validation_at(
                row.question_id.clone(),
                "prediction refers to a question id absent from the dataset",
            )
        })?;
        let score = vqa_accuracy(&row.prediction, &record.answers);
        overall.push(score);
        if let Some(lists) = subset {
            match subset_filter(record, lists).reason() {
                None => retained.push(score),
                Some(reason) => excluded.entry(reason.to_string()).or_default().push(score),
            }
        }
    }
    let subset_report = subset.map(|_| SubsetReport {
        retained: (!retained.is_empty()).then(|| bucket(&retained)),
        excluded: excluded
            .iter()
            .map(|(reason, scores)| (reason.clone(), bucket(scores)))
            .collect(),
    });
    Ok(EvalReport {
        accuracy: overall.iter().sum::<f64>() / overall.len() as f64,
        count: overall.len(),
        subset: subset_report,
    })
}

/// One row of the attention dump: what the model looked at and what it
/// answered, next to the weak labels when the example carries them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRow {
    pub question_id: String,
    pub question: String,
    /// Selected inference sentences, in fusion input order.
    pub inferences: Vec<String>,
    /// Fusion attention over candidates then the question slot.
    pub weights: Vec<f64>,
    /// Weak supervision weights, when the example has them.
    pub label_weights: Option<Vec<f64>>,
    pub prediction: String,
    pub answers: Vec<AnswerCount>,
    pub score: f64,
}

/// Per-question attention analysis. Only meaningful for a checkpoint
/// trained with the mha fusion mode, because the weights come from its
/// fusion block.
pub fn analyze(
    params: &EncoderParameters,
    vocab: &AnswerVocabulary,
    examples: &[EncoderExample],
) -> Result<Vec<AnalysisRow>> {
    if params.config.fusion_mode != FusionMode::Mha {
        return Err(Error::Config(format!(
            "analysis needs a checkpoint trained with fusion_mode mha, found {}",
            params.config.fusion_mode
        )));
    }
    examples
        .iter()
        .map(|ex| {
            let eval = example_loss(params, ex)?;
            let weights = eval
                .attention
                .ok_or_else(|| Error::validation_at(ex.question_id.clone(), "no attention"))?;
            let label_weights = match &ex.commonsense {
                crate::encoder::train::CommonsenseInput::Mha { labels, .. }
                    if !labels.is_empty() =>
                {
                    Some(labels.clone())
                }
                _ => None,
            };
            let prediction = vocab.entries[argmax(&eval.logits)].clone();
            let score = vqa_accuracy(&prediction, &ex.answers);
            Ok(AnalysisRow {
                question_id: ex.question_id.clone(),
                question: ex.question_text.clone(),
                inferences: ex.sentences.clone(),
                weights,
                label_weights,
                prediction,
                answers: ex.answers.clone(),
                score,
            })
        })
        .collect()
}

//! Datasets, the soft answer-matching metric, and the answer vocabulary.
//!
//! A dataset is a JSON document holding question records with
//! annotator-counted answers. Answers are normalized once at ingestion
//! (see [`crate::text::normalize_answer`]) so the metric and the
//! vocabulary never have to re-derive string equality rules.

mod filter;
mod synth;

pub use filter::{subset_filter, ExclusionReason, SubsetVerdict, WordLists};
pub use synth::{generate_synthetic_corpus, SynthConfig, SynthManifest, SynthOutput};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::text::normalize_answer;
use crate::{Error, Result};

/// Answer string the vocabulary reserves for out-of-vocabulary answers.
pub const UNK_TOKEN: &str = "<unk>";

/// Dataset split names used in record files and CLI flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split {other:?}; expected train, val or test"
            ))),
        }
    }
}

/// One answer string with the number of annotators that gave it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerCount {
    pub answer: String,
    pub count: u32,
}

/// A single question with its image, annotator answers and split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub question_id: String,
    pub image_id: String,
    pub question: String,
    pub answers: Vec<AnswerCount>,
    pub split: Split,
}

impl QuestionRecord {
    /// Total annotator count across all answers.
    pub fn annotator_total(&self) -> u32 {
        self.answers.iter().map(|a| a.count).sum()
    }
}

/// A detected object in an image: label, detector confidence and a
/// normalized bounding box `[x1, y1, x2, y2]` with coordinates in [0,1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTag {
    pub label: String,
    pub confidence: f64,
    pub bbox: [f64; 4],
}

/// A validated dataset: records sorted by question id, answers
/// normalized and aggregated.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Annotators per question; every record's counts sum to this.
    pub annotation_count: u32,
    pub records: Vec<QuestionRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetFile {
    annotation_count: u32,
    #[serde(default)]
    okvqa_style: bool,
    records: Vec<QuestionRecord>,
}

/// Load and validate a dataset file, optionally keeping only one split.
///
/// When the file is flagged `okvqa_style`, every annotator count is
/// doubled at ingestion (the convention that each of the five answers
/// counts twice), so all downstream code sees one uniform scheme.
pub fn load_dataset(path: &Path, split: Option<Split>) -> Result<Dataset> {
    let contents = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact {
                path: path.to_path_buf(),
                remedy: "generate or point --config at an existing dataset".into(),
            }
        } else {
            Error::io(path, e)
        }
    })?;
    let file: DatasetFile =
        serde_json::from_str(&contents).map_err(|e| Error::json(path, &e))?;

    let mut records = Vec::with_capacity(file.records.len());
    for mut record in file.records {
        if record.question.trim().is_empty() {
            return Err(Error::validation_at(
                record.question_id.clone(),
                "question text is empty",
            ));
        }
        if record.answers.is_empty() {
            return Err(Error::validation_at(
                record.question_id.clone(),
                "record has no answers",
            ));
        }
        // Normalize answers; merge entries that collapse to the same string.
        let mut merged: BTreeMap<String, u32> = BTreeMap::new();
        for ac in &record.answers {
            if ac.count == 0 {
                return Err(Error::validation_at(
                    record.question_id.clone(),
                    format!("answer {:?} has zero annotator count", ac.answer),
                ));
            }
            let scale = if file.okvqa_style { 2 } else { 1 };
            *merged.entry(normalize_answer(&ac.answer)).or_insert(0) += ac.count * scale;
        }
        record.answers = merged
            .into_iter()
            .map(|(answer, count)| AnswerCount { answer, count })
            .collect();
        let total = record.annotator_total();
        if total != file.annotation_count {
            return Err(Error::validation_at(
                record.question_id.clone(),
                format!(
                    "annotator counts sum to {total}, expected {}",
                    file.annotation_count
                ),
            ));
        }
        records.push(record);
    }

    records.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    for pair in records.windows(2) {
        if pair[0].question_id == pair[1].question_id {
            return Err(Error::validation_at(
                pair[0].question_id.clone(),
                "duplicate question id",
            ));
        }
    }
    if let Some(wanted) = split {
        records.retain(|r| r.split == wanted);
    }
    Ok(Dataset {
        annotation_count: file.annotation_count,
        records,
    })
}

/// Write a validated dataset in canonical form. The output never sets
/// `okvqa_style` because ingestion already folded the doubling into the
/// counts; loading the written file reproduces `dataset` exactly.
pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let file = DatasetFile {
        annotation_count: dataset.annotation_count,
        okvqa_style: false,
        records: dataset.records.clone(),
    };
    let json = serde_json::to_string_pretty(&file).expect("dataset serializes");
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

/// Load an object-tag file: a JSON map from image id to detected tags.
pub fn load_tags(path: &Path) -> Result<BTreeMap<String, Vec<ObjectTag>>> {
    let contents = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact {
                path: path.to_path_buf(),
                remedy: "generate tags or point the config at an existing tag file".into(),
            }
        } else {
            Error::io(path, e)
        }
    })?;
    let tags: BTreeMap<String, Vec<ObjectTag>> =
        serde_json::from_str(&contents).map_err(|e| Error::json(path, &e))?;
    for (image_id, image_tags) in &tags {
        for tag in image_tags {
            let [x1, y1, x2, y2] = tag.bbox;
            let in_unit = |v: f64| (0.0..=1.0).contains(&v);
            if !(in_unit(x1) && in_unit(y1) && in_unit(x2) && in_unit(y2) && x1 <= x2 && y1 <= y2)
            {
                return Err(Error::validation_at(
                    image_id.clone(),
                    format!("tag {:?} has bbox outside the unit square", tag.label),
                ));
            }
            if !in_unit(tag.confidence) {
                return Err(Error::validation_at(
                    image_id.clone(),
                    format!("tag {:?} has confidence outside [0, 1]", tag.label),
                ));
            }
        }
    }
    Ok(tags)
}

/// Soft matching score of a predicted answer against annotator answers:
/// `min(matching annotators / 3, 1)`. Three or more agreeing annotators
/// give full credit, fewer give partial credit.
pub fn vqa_accuracy(prediction: &str, answers: &[AnswerCount]) -> f64 {
    let wanted = normalize_answer(prediction);
    let matched: u32 = answers
        .iter()
        .filter(|a| a.answer == wanted)
        .map(|a| a.count)
        .sum();
    (f64::from(matched) / 3.0).min(1.0)
}

/// Fixed answer vocabulary: frequent training answers plus a trailing
/// unknown entry that absorbs every out-of-vocabulary lookup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerVocabulary {
    /// Lexicographically sorted answers, with [`UNK_TOKEN`] appended last.
    pub entries: Vec<String>,
    pub unk_index: usize,
}

impl AnswerVocabulary {
    /// Build from training records: answers whose total annotator count
    /// reaches `min_count` qualify; empty answers never qualify.
    pub fn build(records: &[QuestionRecord], min_count: u32) -> Self {
        let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
        for record in records {
            for ac in &record.answers {
                if !ac.answer.is_empty() {
                    *counts.entry(ac.answer.as_str()).or_insert(0) += ac.count;
                }
            }
        }
        let mut entries: Vec<String> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .map(|(a, _)| a.to_string())
            .collect();
        // BTreeMap iteration already yields lexicographic order.
        entries.push(UNK_TOKEN.to_string());
        let unk_index = entries.len() - 1;
        AnswerVocabulary { entries, unk_index }
    }

    /// Index of a (normalized) answer; unknown strings map to the
    /// unknown entry.
    pub fn lookup(&self, answer: &str) -> usize {
        let wanted = normalize_answer(answer);
        self.entries[..self.unk_index]
            .binary_search(&wanted)
            .unwrap_or(self.unk_index)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Soft training target over this vocabulary: each answer's
    /// annotator mass lands on its entry, with every out-of-vocabulary
    /// answer pooled onto the unknown entry. Sums to exactly 1 for any
    /// non-empty answer list.
    pub fn target_distribution(&self, answers: &[AnswerCount]) -> Vec<f64> {
        let mut target = vec![0.0; self.entries.len()];
        let total: u32 = answers.iter().map(|a| a.count).sum();
        if total == 0 {
            return target;
        }
        for ac in answers {
            target[self.lookup(&ac.answer)] += f64::from(ac.count) / f64::from(total);
        }
        target
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(id: &str, answers: &[(&str, u32)]) -> QuestionRecord {
        QuestionRecord {
            question_id: id.into(),
            image_id: format!("img_{id}"),
            question: "What is shown?".into(),
            answers: answers
                .iter()
                .map(|(a, c)| AnswerCount {
                    answer: normalize_answer(a),
                    count: *c,
                })
                .collect(),
            split: Split::Train,
        }
    }

    #[test]
    fn metric_matches_annotator_thresholds() {
        let answers = vec![
            AnswerCount { answer: "store".into(), count: 3 },
            AnswerCount { answer: "shop".into(), count: 1 },
            AnswerCount { answer: "market".into(), count: 6 },
        ];
        assert_eq!(vqa_accuracy("store", &answers), 1.0);
        assert!((vqa_accuracy("shop", &answers) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(vqa_accuracy("garage", &answers), 0.0);
        // Normalization applies to the prediction.
        assert_eq!(vqa_accuracy("  Store. ", &answers), 1.0);
    }

    #[test]
    fn metric_agrees_with_per_annotator_oracle() {
        // Oracle: expand counts into individual annotators and score
        // one by one.
        fn oracle(prediction: &str, answers: &[AnswerCount]) -> f64 {
            let wanted = normalize_answer(prediction);
            let mut annotators: Vec<&str> = Vec::new();
            for ac in answers {
                for _ in 0..ac.count {
                    annotators.push(&ac.answer);
                }
            }
            let matched = annotators.iter().filter(|a| **a == wanted).count();
            (matched as f64 / 3.0).min(1.0)
        }

        let pool = ["store", "shop", "market", "garage", ""];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let mut remaining = 10u32;
            let mut answers = Vec::new();
            while remaining > 0 {
                let take = rng.gen_range(1..=remaining);
                let answer = pool[rng.gen_range(0..pool.len())].to_string();
                answers.push(AnswerCount { answer, count: take });
                remaining -= take;
            }
            let prediction = pool[rng.gen_range(0..pool.len())];
            let got = vqa_accuracy(prediction, &answers);
            let want = oracle(prediction, &answers);
            assert_eq!(got, want, "prediction {prediction:?} vs {answers:?}");
        }
    }

    #[test]
    fn vocabulary_respects_min_count_boundary() {
        let records = vec![
            record("q1", &[("snow", 10)]),
            record("q2", &[("rain", 9), ("fog", 1)]),
        ];
        let vocab = AnswerVocabulary::build(&records, 10);
        assert_eq!(vocab.entries, vec!["snow".to_string(), UNK_TOKEN.to_string()]);
        assert_eq!(vocab.lookup("snow"), 0);
        assert_eq!(vocab.lookup("rain"), vocab.unk_index);
        assert_eq!(vocab.lookup("never seen"), vocab.unk_index);
    }

    #[test]
    fn vocabulary_is_order_invariant_and_skips_empty_answers() {
        let a = vec![
            record("q1", &[("zebra", 6), ("ant", 4)]),
            record("q2", &[("ant", 6), ("", 4)]),
            record("q3", &[("zebra", 6), ("", 4)]),
        ];
        let mut b = a.clone();
        b.reverse();
        let va = AnswerVocabulary::build(&a, 10);
        let vb = AnswerVocabulary::build(&b, 10);
        assert_eq!(va, vb);
        assert_eq!(
            va.entries,
            vec!["ant".to_string(), "zebra".to_string(), UNK_TOKEN.to_string()]
        );
    }

    #[test]
    fn target_distribution_sums_to_one_with_oov_mass_on_unk() {
        let records = vec![record("q1", &[("snow", 10)]), record("q2", &[("rain", 10)])];
        let vocab = AnswerVocabulary::build(&records, 10);
        let answers = vec![
            AnswerCount {
                answer: "snow".into(),
                count: 6,
            },
            AnswerCount {
                answer: "sleet".into(),
                count: 3,
            },
            AnswerCount {
                answer: "hail".into(),
                count: 1,
            },
        ];
        let target = vocab.target_distribution(&answers);
        assert_eq!(target.len(), vocab.len());
        assert!((target.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((target[vocab.lookup("snow")] - 0.6).abs() < 1e-15);
        // Both out-of-vocabulary answers pool on the unknown entry.
        assert!((target[vocab.unk_index] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn dataset_roundtrip_is_identity_once_canonical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.json");
        // Loading canonicalizes answer order, so the first save/load pair
        // may reorder; after that the roundtrip must be a fixpoint.
        let dataset = Dataset {
            annotation_count: 10,
            records: vec![record("q1", &[("store", 7), ("shop", 3)])],
        };
        save_dataset(&path, &dataset).unwrap();
        let canonical = load_dataset(&path, None).unwrap();
        assert_eq!(
            canonical.records[0]
                .answers
                .iter()
                .map(|a| a.answer.as_str())
                .collect::<Vec<_>>(),
            vec!["shop", "store"]
        );
        save_dataset(&path, &canonical).unwrap();
        let again = load_dataset(&path, None).unwrap();
        assert_eq!(again, canonical);
    }

    #[test]
    fn okvqa_style_doubles_counts_at_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.json");
        let json = serde_json::json!({
            "annotation_count": 10,
            "okvqa_style": true,
            "records": [{
                "question_id": "q1",
                "image_id": "img1",
                "question": "Where is this?",
                "answers": [
                    {"answer": "store", "count": 3},
                    {"answer": "shop", "count": 2}
                ],
                "split": "train"
            }]
        });
        std::fs::write(&path, json.to_string()).unwrap();
        let dataset = load_dataset(&path, None).unwrap();
        assert_eq!(dataset.records[0].answers[1].count, 6); // store
        assert_eq!(dataset.records[0].answers[0].count, 4); // shop
        assert_eq!(dataset.records[0].annotator_total(), 10);
    }

    #[test]
    fn mismatched_annotator_sum_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.json");
        let json = serde_json::json!({
            "annotation_count": 10,
            "records": [{
                "question_id": "q_bad",
                "image_id": "img1",
                "question": "Where is this?",
                "answers": [{"answer": "store", "count": 4}],
                "split": "train"
            }]
        });
        std::fs::write(&path, json.to_string()).unwrap();
        let err = load_dataset(&path, None).unwrap_err();
        assert!(err.to_string().contains("q_bad"), "{err}");
    }

    #[test]
    fn malformed_json_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.json");
        std::fs::write(&path, "{\n  \"annotation_count\": 10,\n  oops\n}").unwrap();
        let err = load_dataset(&path, None).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn missing_dataset_is_a_missing_artifact() {
        let err = load_dataset(Path::new("/nonexistent/data.json"), None).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn tags_outside_unit_square_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tags.json");
        let json = serde_json::json!({
            "img1": [{"label": "dog", "confidence": 0.9, "bbox": [0.0, 0.0, 1.2, 1.0]}]
        });
        std::fs::write(&path, json.to_string()).unwrap();
        let err = load_tags(&path).unwrap_err();
        assert!(err.to_string().contains("img1"), "{err}");
    }
}

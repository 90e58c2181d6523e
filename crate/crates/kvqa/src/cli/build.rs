//! Bridges dataset records, detector tags and selected inferences into
//! encoder examples, matching the commonsense channel to the model's
//! fusion mode.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{AnswerVocabulary, ObjectTag, QuestionRecord};
use crate::encoder::{
    supervision_gate, CommonsenseInput, EncoderExample, FusionMode, ModelConfig, RegionToken,
    Tokenizer, TOKEN_UNK,
};
use crate::fusion::{answer_bearing, label_distribution};
use crate::knowledge::{
    build_qo_phrase, rephrase_question, select_object_tags, QOPhrase, RephraseRules,
};
use crate::selection::{EmbeddingBackend, ScoredInference};
use crate::text::Stopwords;
use crate::{Error, Result};

/// One line of the selected-inference file: everything downstream
/// stages need to rebuild a question's commonsense channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedRow {
    pub question_id: String,
    /// The question–object phrase the inferences were generated from
    /// and ranked against.
    pub phrase: String,
    pub selected: Vec<ScoredInference>,
}

/// Rephrase a question and combine it with the image's object tags.
pub fn question_phrase(
    record: &QuestionRecord,
    image_tags: &[ObjectTag],
    rules: &RephraseRules,
) -> Result<QOPhrase> {
    let declarative = rephrase_question(&record.question, rules);
    let labels = select_object_tags(image_tags);
    build_qo_phrase(&declarative, &labels)
}

/// Map detector tags onto region tokens: the label's first word id
/// plus the five-number geometry (bbox corners and confidence).
pub fn region_tokens(tags: &[ObjectTag], tokenizer: &Tokenizer) -> Vec<RegionToken> {
    tags.iter()
        .map(|tag| RegionToken {
            label: tokenizer
                .encode(&tag.label)
                .first()
                .copied()
                .unwrap_or(TOKEN_UNK),
            geometry: [
                tag.bbox[0],
                tag.bbox[1],
                tag.bbox[2],
                tag.bbox[3],
                tag.confidence,
            ],
        })
        .collect()
}

/// Token vocabulary for a training corpus: question words, the selected
/// inference sentences and the tag labels of the referenced images.
pub fn build_tokenizer(
    records: &[QuestionRecord],
    tags: &BTreeMap<String, Vec<ObjectTag>>,
    selections: &BTreeMap<String, SelectedRow>,
) -> Tokenizer {
    let mut texts: Vec<&str> = Vec::new();
    for record in records {
        texts.push(&record.question);
        if let Some(row) = selections.get(&record.question_id) {
            for item in &row.selected {
                texts.push(&item.inference.sentence);
            }
        }
        if let Some(image_tags) = tags.get(&record.image_id) {
            for tag in image_tags {
                texts.push(&tag.label);
            }
        }
    }
    Tokenizer::build(texts)
}

/// Builds encoder examples for one (model, vocabulary) pairing.
pub struct ExampleBuilder<'a> {
    pub model: &'a ModelConfig,
    pub tokenizer: &'a Tokenizer,
    pub vocab: &'a AnswerVocabulary,
    pub stopwords: &'a Stopwords,
    /// Supervision gating applies only to training examples.
    pub training: bool,
}

impl ExampleBuilder<'_> {
    /// Build examples for `records` in order. `backend` supplies
    /// sentence embeddings and is only consulted by the linear and mha
    /// fusion modes.
    pub fn build(
        &self,
        records: &[QuestionRecord],
        tags: &BTreeMap<String, Vec<ObjectTag>>,
        selections: &BTreeMap<String, SelectedRow>,
        mut backend: Option<&mut EmbeddingBackend>,
    ) -> Result<Vec<EncoderExample>> {
        records
            .iter()
            .map(|record| self.one(record, tags, selections, backend.as_deref_mut()))
            .collect()
    }

    fn one(
        &self,
        record: &QuestionRecord,
        tags: &BTreeMap<String, Vec<ObjectTag>>,
        selections: &BTreeMap<String, SelectedRow>,
        backend: Option<&mut EmbeddingBackend>,
    ) -> Result<EncoderExample> {
        let image_tags = tags.get(&record.image_id).map_or(&[][..], Vec::as_slice);
        if image_tags.is_empty() {
            log::debug!(
                "image {} has no detector tags; question {} gets no regions",
                record.image_id,
                record.question_id
            );
        }
        let selection = selections.get(&record.question_id);
        let sentences: Vec<String> = selection
            .map(|row| {
                row.selected
                    .iter()
                    .take(self.model.k)
                    .map(|item| item.inference.sentence.clone())
                    .collect()
            })
            .unwrap_or_default();

        let commonsense = match self.model.fusion_mode {
            FusionMode::None => CommonsenseInput::None,
            FusionMode::Tokens => {
                let mut ids = Vec::new();
                for sentence in &sentences {
                    ids.extend(self.tokenizer.encode(sentence));
                }
                CommonsenseInput::Tokens(ids)
            }
            FusionMode::Linear => {
                let backend = need_backend(backend, record)?;
                let embeddings = backend.embed_all(&sentences)?;
                CommonsenseInput::Linear(
                    embeddings.into_iter().map(|e| e.values).collect(),
                )
            }
            FusionMode::Mha => {
                let backend = need_backend(backend, record)?;
                let query_text = selection
                    .map(|row| row.phrase.clone())
                    .unwrap_or_else(|| record.question.clone());
                let mut texts = vec![query_text];
                texts.extend(sentences.iter().cloned());
                let mut embeddings = backend.embed_all(&texts)?;
                let question = embeddings.remove(0).values;
                let candidates: Vec<Vec<f64>> =
                    embeddings.into_iter().map(|e| e.values).collect();
                let bearing: Vec<bool> = sentences
                    .iter()
                    .map(|s| answer_bearing(s, &record.answers, self.stopwords))
                    .collect();
                CommonsenseInput::Mha {
                    question,
                    candidates,
                    labels: label_distribution(&bearing),
                }
            }
        };

        let supervised = self.training
            && self.model.fusion_mode == FusionMode::Mha
            && supervision_gate(&record.question_id, self.model.supervision_fraction);

        Ok(EncoderExample {
            question_id: record.question_id.clone(),
            question_text: record.question.clone(),
            question_tokens: self.tokenizer.encode(&record.question),
            regions: region_tokens(image_tags, self.tokenizer),
            sentences,
            commonsense,
            target: self.vocab.target_distribution(&record.answers),
            answers: record.answers.clone(),
            supervised,
        })
    }
}

fn need_backend<'a>(
    backend: Option<&'a mut EmbeddingBackend>,
    record: &QuestionRecord,
) -> Result<&'a mut EmbeddingBackend> {
    backend.ok_or_else(|| {
        Error::validation_at(
            record.question_id.clone(),
            "this fusion mode consumes sentence embeddings but no embedder is available",
        )
    })
}

/// Write the selected-inference file, one row per question.
pub fn save_selected(path: &Path, rows: &[SelectedRow]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("row serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Load the selected-inference file into a per-question map.
pub fn load_selected(path: &Path) -> Result<BTreeMap<String, SelectedRow>> {
    let contents = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact {
                path: path.to_path_buf(),
                remedy: "run the select command first to rank inferences".into(),
            }
        } else {
            Error::io(path, e)
        }
    })?;
    let mut rows = BTreeMap::new();
    for line in contents.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let row: SelectedRow =
            serde_json::from_str(line).map_err(|e| Error::json(path, &e))?;
        if rows.insert(row.question_id.clone(), row).is_some() {
            return Err(Error::validation_at(
                path.display().to_string(),
                "duplicate question id in selected-inference file",
            ));
        }
    }
    Ok(rows)
}

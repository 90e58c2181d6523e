//! The six pipeline commands: synth, knowledge, select, train, eval,
//! analyze. Each validates its configuration, names any missing
//! upstream artifact, writes its outputs (plus metadata sidecars) into
//! the configured output directory and never mutates its inputs — the
//! knowledge cache, which the knowledge command both reads and appends,
//! is that command's own output.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::corpus::{
    generate_synthetic_corpus, load_dataset, load_tags, AnswerCount, AnswerVocabulary, Dataset,
    Split, SynthConfig, SynthManifest, WordLists,
};
use crate::encoder::{
    analyze, evaluate, load_checkpoint, predict, pretrain_then_finetune, save_checkpoint, train,
    AnalysisRow, EvalReport, FusionMode, PredictionRow, TrainOutcome,
};
use crate::knowledge::{
    dedup, CacheLine, Inference, KnowledgeCache, KnowledgeSource, QOPhrase, RelationSet,
    RephraseRules, ServiceConfig, StubTable,
};
use crate::selection::{
    augment_train, label_similarity, rank_and_select, EmbedServiceClient, Embedder,
    EmbeddingBackend, EmbeddingVector, TrainingPair,
};
use crate::text::Stopwords;
use crate::{Error, Result};

use super::build::{
    build_tokenizer, load_selected, question_phrase, save_selected, ExampleBuilder, SelectedRow,
};
use super::config::{read_meta, write_meta, ArtifactMeta, KnowledgeSourceKind, RunConfig};

/// What the knowledge command did.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeSummary {
    /// Distinct question–object phrases across all splits.
    pub phrases: usize,
    /// Phrases whose inferences were generated on this run (the rest
    /// were already cached).
    pub newly_cached: usize,
    pub warnings: usize,
}

/// What the select command did.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectSummary {
    pub questions: usize,
    /// Weakly labeled pairs used to augment the embedder.
    pub pairs: usize,
    pub augmented: bool,
    pub warnings: usize,
}

/// Flags of the eval command.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Also report accuracy under the commonsense-subset filter.
    pub subset: bool,
    /// Proceed despite inputs with mixed config digests.
    pub force: bool,
}

/// Generate the synthetic corpus into the output directory.
pub fn cmd_synth(config: &RunConfig) -> Result<SynthManifest> {
    config.validate()?;
    let meta = ArtifactMeta::new(config);
    let synth_config = SynthConfig {
        seed: config.seed,
        n_train: config.synth.n_train,
        n_val: config.synth.n_val,
        n_test: config.synth.n_test,
        knowledge_strength: config.synth.knowledge_strength,
    };
    let output = generate_synthetic_corpus(&synth_config)?;
    output.write(&config.out_dir)?;
    for name in [
        "train.json",
        "val.json",
        "test.json",
        "tags.json",
        "stub_knowledge.json",
        "manifest.json",
    ] {
        write_meta(&config.out_dir.join(name), &meta)?;
    }
    Ok(output.manifest)
}

/// Populate the knowledge cache with inferences for every distinct
/// phrase in all three splits. Already-cached phrases are skipped, so
/// reruns are no-ops.
pub fn cmd_knowledge(config: &RunConfig) -> Result<KnowledgeSummary> {
    config.validate()?;
    let meta = ArtifactMeta::new(config);
    let rules = load_rules(config)?;
    let relations = load_relations(config)?;
    let tags = load_tags(&config.tags_path())?;
    let datasets = load_all_splits(config)?;

    let mut seen = BTreeSet::new();
    let mut phrases: Vec<QOPhrase> = Vec::new();
    for dataset in &datasets {
        for record in &dataset.records {
            let image_tags = tags.get(&record.image_id).map_or(&[][..], Vec::as_slice);
            let phrase = question_phrase(record, image_tags, &rules)?;
            if seen.insert(phrase.phrase.clone()) {
                phrases.push(phrase);
            }
        }
    }

    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let cache_path = config.cache_path();
    let beam = config.knowledge.beam;
    let mut newly_cached = 0usize;
    let warnings;

    match config.knowledge.source {
        KnowledgeSourceKind::Stub => {
            let table = load_stub(config)?;
            let mut cache = KnowledgeCache::open(&cache_path)?;
            let missing: Vec<QOPhrase> = phrases
                .iter()
                .filter(|p| !cache.contains_phrase(&p.phrase))
                .cloned()
                .collect();
            let mut source = KnowledgeSource::stub(table);
            let batch = source.generate_batch(&missing, &relations, beam)?;
            warnings = batch.warnings.len();
            for warning in &batch.warnings {
                log::warn!("{warning}");
            }
            for (phrase, inferences) in missing.iter().zip(&batch.inferences) {
                let lines: Vec<CacheLine> = inferences
                    .iter()
                    .map(|inf| CacheLine {
                        phrase: phrase.phrase.clone(),
                        relation: inf.relation.clone(),
                        beam_rank: inf.beam_rank,
                        tail: inf.tail.clone(),
                        sentence: inf.sentence.clone(),
                    })
                    .collect();
                if !lines.is_empty() {
                    cache.append_phrase(&phrase.phrase, lines)?;
                    newly_cached += 1;
                }
            }
        }
        KnowledgeSourceKind::Service => {
            let cache = KnowledgeCache::open(&cache_path)?;
            let already: BTreeSet<&str> = phrases
                .iter()
                .map(|p| p.phrase.as_str())
                .filter(|p| cache.contains_phrase(p))
                .collect();
            let service_config = ServiceConfig {
                url: config
                    .knowledge
                    .service_url
                    .clone()
                    .expect("validated above"),
                timeout_secs: config.knowledge.timeout_secs,
                max_in_flight: config.knowledge.max_in_flight,
            };
            let mut source = KnowledgeSource::service(service_config, cache)?;
            let batch = source.generate_batch(&phrases, &relations, beam)?;
            warnings = batch.warnings.len();
            for warning in &batch.warnings {
                log::warn!("{warning}");
            }
            newly_cached = phrases
                .iter()
                .zip(&batch.inferences)
                .filter(|(p, inferences)| {
                    !already.contains(p.phrase.as_str()) && !inferences.is_empty()
                })
                .count();
        }
        KnowledgeSourceKind::Cache => {
            return Err(Error::Config(
                "the knowledge command populates the cache; set knowledge.source to \
                 \"stub\" or \"service\""
                    .into(),
            ));
        }
    }

    touch(&cache_path)?;
    write_meta(&cache_path, &meta)?;
    Ok(KnowledgeSummary {
        phrases: phrases.len(),
        newly_cached,
        warnings,
    })
}

/// Generate, dedup and rank inferences for every question, training
/// the sentence embedder on the way.
pub fn cmd_select(config: &RunConfig) -> Result<SelectSummary> {
    config.validate()?;
    let meta = ArtifactMeta::new(config);
    let rules = load_rules(config)?;
    let relations = load_relations(config)?;
    let stopwords = load_stopwords(config)?;
    let tags = load_tags(&config.tags_path())?;
    let datasets = load_all_splits(config)?;
    let cache = KnowledgeCache::load_required(&config.cache_path())?;
    let mut source = KnowledgeSource::cache(cache);

    struct Pending {
        question_id: String,
        phrase: QOPhrase,
        inferences: Vec<Inference>,
        split: Split,
        answers: Vec<AnswerCount>,
    }

    let mut warnings = 0usize;
    let mut pending: Vec<Pending> = Vec::new();
    for dataset in &datasets {
        let phrases: Vec<QOPhrase> = dataset
            .records
            .iter()
            .map(|record| {
                let image_tags = tags.get(&record.image_id).map_or(&[][..], Vec::as_slice);
                question_phrase(record, image_tags, &rules)
            })
            .collect::<Result<_>>()?;
        let batch = source.generate_batch(&phrases, &relations, config.knowledge.beam)?;
        warnings += batch.warnings.len();
        for warning in &batch.warnings {
            log::warn!("{warning}");
        }
        for ((record, phrase), inferences) in dataset
            .records
            .iter()
            .zip(phrases)
            .zip(batch.inferences)
        {
            pending.push(Pending {
                question_id: record.question_id.clone(),
                phrase,
                inferences: dedup(&inferences, config.knowledge.dedup_threshold),
                split: record.split,
                answers: record.answers.clone(),
            });
        }
    }

    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let mut pairs = 0usize;
    let mut augmented = false;
    let mut backend = match &config.embedder.service_url {
        Some(url) => {
            log::warn!("embedding service configured; embedder augmentation is skipped");
            EmbeddingBackend::Service(EmbedServiceClient::new(url, config.embedder.timeout_secs)?)
        }
        None => {
            let mut embedder = Embedder::new(config.embedder.dim, config.seed);
            let train_pairs: Vec<TrainingPair> = pending
                .iter()
                .filter(|p| p.split == Split::Train)
                .flat_map(|p| {
                    p.inferences.iter().map(|inf| TrainingPair {
                        question: p.phrase.phrase.clone(),
                        sentence: inf.sentence.clone(),
                        label: label_similarity(&inf.sentence, &p.answers, &stopwords),
                    })
                })
                .collect();
            pairs = train_pairs.len();
            augment_train(
                &mut embedder,
                &train_pairs,
                config.embedder.augment_epochs,
                config.embedder.augment_learning_rate,
            )?;
            augmented = embedder.trained;
            let embedder_out = config.out_dir.join("embedder.json");
            embedder.save(&embedder_out)?;
            write_meta(&embedder_out, &meta)?;
            EmbeddingBackend::Local(embedder)
        }
    };

    let mut rows = Vec::with_capacity(pending.len());
    for p in &pending {
        let mut texts = vec![p.phrase.phrase.clone()];
        texts.extend(p.inferences.iter().map(|inf| inf.sentence.clone()));
        let mut embeddings = backend.embed_all(&texts)?;
        let question = embeddings.remove(0);
        let candidates: Vec<(Inference, EmbeddingVector)> = p
            .inferences
            .iter()
            .cloned()
            .zip(embeddings)
            .collect();
        let selected = rank_and_select(&question, &candidates, config.model.k, &relations)?;
        rows.push(SelectedRow {
            question_id: p.question_id.clone(),
            phrase: p.phrase.phrase.clone(),
            selected,
        });
    }

    let selected_out = config.out_dir.join("selected.jsonl");
    save_selected(&selected_out, &rows)?;
    write_meta(&selected_out, &meta)?;
    Ok(SelectSummary {
        questions: rows.len(),
        pairs,
        augmented,
        warnings,
    })
}

/// Train the answerer and save the best-validation checkpoint plus the
/// per-epoch training log.
pub fn cmd_train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let meta = ArtifactMeta::new(config);
    let mut model = config.model;
    model.seed = config.seed;

    let train_set = load_dataset(&config.train_path(), None)?;
    let val_set = load_dataset(&config.val_path(), None)?;
    let tags = load_tags(&config.tags_path())?;
    let selections = if model.fusion_mode == FusionMode::None {
        BTreeMap::new()
    } else {
        load_selected(&config.selected_path())?
    };
    let stopwords = load_stopwords(config)?;
    let tokenizer = build_tokenizer(&train_set.records, &tags, &selections);
    let vocab = AnswerVocabulary::build(&train_set.records, config.train.answer_min_count);
    let mut backend = make_backend(config, model.fusion_mode)?;

    let train_examples = ExampleBuilder {
        model: &model,
        tokenizer: &tokenizer,
        vocab: &vocab,
        stopwords: &stopwords,
        training: true,
    }
    .build(&train_set.records, &tags, &selections, backend.as_mut())?;
    let val_examples = ExampleBuilder {
        model: &model,
        tokenizer: &tokenizer,
        vocab: &vocab,
        stopwords: &stopwords,
        training: false,
    }
    .build(&val_set.records, &tags, &selections, backend.as_mut())?;

    let outcome = if config.train.pretrain_epochs > 0 {
        let mut plain = model;
        plain.fusion_mode = FusionMode::None;
        let none_selections = BTreeMap::new();
        let pretrain_examples = ExampleBuilder {
            model: &plain,
            tokenizer: &tokenizer,
            vocab: &vocab,
            stopwords: &stopwords,
            training: true,
        }
        .build(&train_set.records, &tags, &none_selections, None)?;
        let pretrain_val = ExampleBuilder {
            model: &plain,
            tokenizer: &tokenizer,
            vocab: &vocab,
            stopwords: &stopwords,
            training: false,
        }
        .build(&val_set.records, &tags, &none_selections, None)?;
        pretrain_then_finetune(
            &pretrain_examples,
            &pretrain_val,
            &train_examples,
            &val_examples,
            &model,
            config.train.pretrain_epochs,
            &tokenizer,
            &vocab,
        )?
    } else {
        train(&train_examples, &val_examples, &model, &tokenizer, &vocab)?
    };

    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let checkpoint_out = config.out_dir.join("checkpoint.bin");
    save_checkpoint(&checkpoint_out, &outcome.checkpoint)?;
    write_meta(&checkpoint_out, &meta)?;
    let log_out = config.train_log_path();
    write_jsonl(&log_out, &outcome.log)?;
    write_meta(&log_out, &meta)?;
    Ok(outcome)
}

/// Report file: the evaluation report with provenance embedded.
#[derive(Serialize)]
struct ReportFile<'a> {
    meta: &'a ArtifactMeta,
    #[serde(flatten)]
    report: &'a EvalReport,
}

/// Evaluate a checkpoint on the test split, or replay saved
/// predictions when `paths.predictions` is set.
pub fn cmd_eval(config: &RunConfig, options: EvalOptions) -> Result<EvalReport> {
    config.validate()?;
    let meta = ArtifactMeta::new(config);
    let test_set = load_dataset(&config.test_path(), None)?;
    let lists = if options.subset {
        Some(load_word_lists(config)?)
    } else {
        None
    };

    let report = if let Some(predictions_path) = &config.paths.predictions {
        check_digests(
            &[predictions_path.clone(), config.test_path()],
            options.force,
        )?;
        let predictions = load_predictions(predictions_path)?;
        evaluate(&predictions, &test_set.records, lists.as_ref())?
    } else {
        check_digests(
            &[
                config.checkpoint_path(),
                config.selected_path(),
                config.embedder_path(),
                config.test_path(),
                config.tags_path(),
            ],
            options.force,
        )?;
        let checkpoint = load_checkpoint(&config.checkpoint_path())?;
        let model = checkpoint.params.config;
        let tags = load_tags(&config.tags_path())?;
        let selections = if model.fusion_mode == FusionMode::None {
            BTreeMap::new()
        } else {
            load_selected(&config.selected_path())?
        };
        let stopwords = load_stopwords(config)?;
        let mut backend = make_backend(config, model.fusion_mode)?;
        let examples = ExampleBuilder {
            model: &model,
            tokenizer: &checkpoint.tokenizer,
            vocab: &checkpoint.vocab,
            stopwords: &stopwords,
            training: false,
        }
        .build(&test_set.records, &tags, &selections, backend.as_mut())?;
        let predictions = predict(&checkpoint.params, &checkpoint.vocab, &examples)?;
        std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
        let predictions_out = config.predictions_out_path();
        write_jsonl(&predictions_out, &predictions)?;
        write_meta(&predictions_out, &meta)?;
        evaluate(&predictions, &test_set.records, lists.as_ref())?
    };

    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let report_path = config.report_path();
    let file = ReportFile {
        meta: &meta,
        report: &report,
    };
    let json = serde_json::to_string_pretty(&file).expect("report serializes");
    std::fs::write(&report_path, json + "\n").map_err(|e| Error::io(&report_path, e))?;
    Ok(report)
}

/// Dump fusion attention for the test split: a JSONL file plus a
/// human-readable narrative.
pub fn cmd_analyze(config: &RunConfig) -> Result<Vec<AnalysisRow>> {
    config.validate()?;
    let meta = ArtifactMeta::new(config);
    let checkpoint = load_checkpoint(&config.checkpoint_path())?;
    let model = checkpoint.params.config;
    if model.fusion_mode != FusionMode::Mha {
        return Err(Error::Config(format!(
            "analysis needs a checkpoint trained with fusion_mode mha, found {}",
            model.fusion_mode
        )));
    }
    let test_set = load_dataset(&config.test_path(), None)?;
    let tags = load_tags(&config.tags_path())?;
    let selections = load_selected(&config.selected_path())?;
    let stopwords = load_stopwords(config)?;
    let mut backend = make_backend(config, model.fusion_mode)?;
    let examples = ExampleBuilder {
        model: &model,
        tokenizer: &checkpoint.tokenizer,
        vocab: &checkpoint.vocab,
        stopwords: &stopwords,
        training: false,
    }
    .build(&test_set.records, &tags, &selections, backend.as_mut())?;
    let rows = analyze(&checkpoint.params, &checkpoint.vocab, &examples)?;

    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let attention_out = config.attention_path();
    write_jsonl(&attention_out, &rows)?;
    write_meta(&attention_out, &meta)?;
    let narrative_out = config.narrative_path();
    std::fs::write(&narrative_out, render_narrative(&rows))
        .map_err(|e| Error::io(&narrative_out, e))?;
    write_meta(&narrative_out, &meta)?;
    Ok(rows)
}

/// Per-question narrative: prediction, gold answers and the attention
/// distribution over inferences plus the question slot.
fn render_narrative(rows: &[AnalysisRow]) -> String {
    let mut out = String::new();
    for row in rows {
        out.push_str(&format!("question {}: {}\n", row.question_id, row.question));
        out.push_str(&format!(
            "  prediction: {} (score {:.3})\n",
            row.prediction, row.score
        ));
        let gold: Vec<String> = row
            .answers
            .iter()
            .map(|a| format!("{} x{}", a.answer, a.count))
            .collect();
        out.push_str(&format!("  gold: {}\n", gold.join(", ")));
        out.push_str("  attention:\n");
        for (i, weight) in row.weights.iter().enumerate() {
            let name = row
                .inferences
                .get(i)
                .map_or("(question)", String::as_str);
            let label = row
                .label_weights
                .as_ref()
                .and_then(|l| l.get(i))
                .map(|l| format!("  [label {l:.3}]"))
                .unwrap_or_default();
            out.push_str(&format!("    {weight:.4}  {name}{label}\n"));
        }
        out.push('\n');
    }
    out
}

fn load_all_splits(config: &RunConfig) -> Result<[Dataset; 3]> {
    Ok([
        load_dataset(&config.train_path(), None)?,
        load_dataset(&config.val_path(), None)?,
        load_dataset(&config.test_path(), None)?,
    ])
}

fn load_rules(config: &RunConfig) -> Result<RephraseRules> {
    match &config.paths.rephrase_rules {
        Some(path) => RephraseRules::load(path),
        None => Ok(RephraseRules::default_rules()),
    }
}

fn load_relations(config: &RunConfig) -> Result<RelationSet> {
    match &config.paths.relations {
        Some(path) => RelationSet::load(path),
        None => Ok(RelationSet::default_set()),
    }
}

fn load_stopwords(config: &RunConfig) -> Result<Stopwords> {
    match &config.paths.stopwords {
        Some(path) => {
            let contents =
                std::fs::read_to_string(path).map_err(|e| Error::io(path.as_path(), e))?;
            Ok(Stopwords::parse(&contents))
        }
        None => Ok(Stopwords::default_list()),
    }
}

fn load_word_lists(config: &RunConfig) -> Result<WordLists> {
    match &config.paths.word_lists {
        Some(dir) => WordLists::load_dir(dir),
        None => Ok(WordLists::default_lists()),
    }
}

fn load_stub(config: &RunConfig) -> Result<StubTable> {
    let path = config.stub_path();
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path,
            remedy: "run the synth command first to produce the stub table, or configure a \
                     service source"
                .into(),
        });
    }
    StubTable::load(&path)
}

/// The embedding backend a fusion mode needs: the linear and mha modes
/// consume sentence embeddings, the others none.
fn make_backend(config: &RunConfig, mode: FusionMode) -> Result<Option<EmbeddingBackend>> {
    if !matches!(mode, FusionMode::Linear | FusionMode::Mha) {
        return Ok(None);
    }
    let backend = match &config.embedder.service_url {
        Some(url) => {
            EmbeddingBackend::Service(EmbedServiceClient::new(url, config.embedder.timeout_secs)?)
        }
        None => EmbeddingBackend::Local(Embedder::load(&config.embedder_path())?),
    };
    Ok(Some(backend))
}

fn load_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let contents = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact {
                path: path.to_path_buf(),
                remedy: "run the eval command without paths.predictions first to produce \
                         predictions"
                    .into(),
            }
        } else {
            Error::io(path, e)
        }
    })?;
    let mut rows = Vec::new();
    for line in contents.lines() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(line).map_err(|e| Error::json(path, &e))?);
    }
    Ok(rows)
}

/// Refuse inputs whose metadata sidecars disagree on the config digest.
/// Inputs without a sidecar (user-provided files) are not checked.
fn check_digests(paths: &[PathBuf], force: bool) -> Result<()> {
    let mut stamped: Vec<(&Path, String)> = Vec::new();
    for path in paths {
        if let Some(meta) = read_meta(path)? {
            stamped.push((path, meta.config_digest));
        }
    }
    let distinct: BTreeSet<&str> = stamped.iter().map(|(_, d)| d.as_str()).collect();
    if distinct.len() <= 1 {
        return Ok(());
    }
    let listing: Vec<String> = stamped
        .iter()
        .map(|(p, d)| format!("{} ({})", p.display(), &d[..12.min(d.len())]))
        .collect();
    if force {
        log::warn!(
            "proceeding despite mixed config digests: {}",
            listing.join(", ")
        );
        return Ok(());
    }
    Err(Error::validation(format!(
        "input artifacts were produced by different configurations: {}; rerun the upstream \
         commands under one config, or pass --force to evaluate anyway",
        listing.join(", ")
    )))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("row serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Create the file if it does not exist (a cache with zero lines is
/// still a valid artifact).
fn touch(path: &Path) -> Result<()> {
    std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

//! Training loop: soft cross-entropy on answers, optional attention
//! supervision through the fusion block, SGD with gradient
//! accumulation, per-epoch validation, and best-validation
//! checkpointing. Runs are bitwise reproducible for a fixed seed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{vqa_accuracy, AnswerCount, AnswerVocabulary};
use crate::encoder::checkpoint::Checkpoint;
use crate::encoder::model::{backward, forward, soft_cross_entropy, EncoderParameters};
use crate::encoder::sequence::{assemble_sequence, CommonsenseSlots, RegionToken};
use crate::encoder::tokenizer::Tokenizer;
use crate::encoder::{FusionMode, ModelConfig};
use crate::fusion::{attention_loss, fuse, fuse_backward, FusionOutput};
use crate::{Error, Result};

/// Commonsense evidence attached to one question, in the shape the
/// configured fusion mode consumes.
#[derive(Debug, Clone, PartialEq)]
pub enum CommonsenseInput {
    /// Knowledge channel disabled.
    None,
    /// Word ids of the selected inference sentences, concatenated.
    Tokens(Vec<usize>),
    /// One sentence embedding per selected inference.
    Linear(Vec<Vec<f64>>),
    /// Inputs for the fusion block: the question embedding, candidate
    /// sentence embeddings, and the weak attention labels over
    /// candidates-then-question (`k + 1`, empty when unlabeled).
    Mha {
        question: Vec<f64>,
        candidates: Vec<Vec<f64>>,
        labels: Vec<f64>,
    },
}

/// One fully prepared training or evaluation example.
#[derive(Debug, Clone)]
pub struct EncoderExample {
    pub question_id: String,
    pub question_text: String,
    pub question_tokens: Vec<usize>,
    pub regions: Vec<RegionToken>,
    /// Selected inference sentences, for analysis dumps.
    pub sentences: Vec<String>,
    pub commonsense: CommonsenseInput,
    /// Soft answer target over the answer vocabulary.
    pub target: Vec<f64>,
    pub answers: Vec<AnswerCount>,
    /// Whether this example's attention is supervised (only meaningful
    /// for the mha fusion mode).
    pub supervised: bool,
}

/// Losses and test-time signals for one example.
#[derive(Debug, Clone)]
pub struct ExampleEvaluation {
    pub answer_loss: f64,
    /// Attention cross-entropy, present only when supervised under mha.
    pub attention_loss: Option<f64>,
    /// `answer_loss` plus the attention term when present.
    pub total_loss: f64,
    pub logits: Vec<f64>,
    /// Fusion attention over candidates-then-question (mha mode only).
    pub attention: Option<Vec<f64>>,
}

struct RunState {
    eval: ExampleEvaluation,
    seq: crate::encoder::sequence::InputSequence,
    cache: crate::encoder::model::ForwardCache,
    d_logits: Vec<f64>,
    fusion_out: Option<FusionOutput>,
}

fn run_example(params: &EncoderParameters, ex: &EncoderExample) -> Result<RunState> {
    let (slots, fusion_out) = match (params.config.fusion_mode, &ex.commonsense) {
        (FusionMode::None, CommonsenseInput::None) => (CommonsenseSlots::None, None),
        (FusionMode::Tokens, CommonsenseInput::Tokens(ids)) => {
            (CommonsenseSlots::Tokens(ids.clone()), None)
        }
        (FusionMode::Linear, CommonsenseInput::Linear(embs)) => {
            (CommonsenseSlots::Linear(embs.clone()), None)
        }
        (FusionMode::Mha, CommonsenseInput::Mha { question, candidates, .. }) => {
            let fusion = params.fusion.as_ref().ok_or_else(|| {
                Error::validation("checkpoint has no fusion block but fusion_mode is mha")
            })?;
            let out = fuse(fusion, question, candidates)?;
            (CommonsenseSlots::Fused(out.fused.clone()), Some(out))
        }
        (mode, _) => {
            return Err(Error::validation(format!(
                "example {} carries commonsense input of the wrong shape for fusion mode {mode}",
                ex.question_id
            )))
        }
    };
    let seq = assemble_sequence(
        &ex.question_tokens,
        &slots,
        &ex.regions,
        params.config.max_len,
    )?;
    let (logits, cache) = forward(params, &seq)?;
    if ex.target.len() != params.n_answers {
        return Err(Error::validation(format!(
            "example {} target has {} entries but the vocabulary has {}",
            ex.question_id,
            ex.target.len(),
            params.n_answers
        )));
    }
    let (answer_loss, d_logits) = soft_cross_entropy(&logits, &ex.target)?;

    let mut attention = None;
    let mut att_loss = None;
    if let Some(out) = &fusion_out {
        attention = Some(out.attention.clone());
        if ex.supervised {
            if let CommonsenseInput::Mha { labels, .. } = &ex.commonsense {
                if !labels.is_empty() {
                    att_loss = Some(attention_loss(&out.attention, labels)?);
                }
            }
        }
    }
    let total_loss = answer_loss + att_loss.unwrap_or(0.0);
    Ok(RunState {
        eval: ExampleEvaluation {
            answer_loss,
            attention_loss: att_loss,
            total_loss,
            logits,
            attention,
        },
        seq,
        cache,
        d_logits,
        fusion_out,
    })
}

/// Forward-only loss and signals for one example.
pub fn example_loss(params: &EncoderParameters, ex: &EncoderExample) -> Result<ExampleEvaluation> {
    run_example(params, ex).map(|state| state.eval)
}

/// Loss plus the full analytic gradient for one example. The gradient
/// container mirrors the parameter layout, including the fusion block
/// when present; sentence embeddings themselves are treated as fixed
/// inputs here.
pub fn example_gradients(
    params: &EncoderParameters,
    ex: &EncoderExample,
) -> Result<(ExampleEvaluation, EncoderParameters)> {
    let state = run_example(params, ex)?;
    let (mut grads, d_fused) = backward(params, &state.seq, &state.cache, &state.d_logits)?;
    if let Some(out) = &state.fusion_out {
        let d_fused = d_fused
            .ok_or_else(|| Error::validation("fused slot missing from assembled sequence"))?;
        let labels = match (&ex.commonsense, ex.supervised) {
            (CommonsenseInput::Mha { labels, .. }, true) if !labels.is_empty() => {
                Some(labels.as_slice())
            }
            _ => None,
        };
        let fusion = params.fusion.as_ref().expect("fusion output implies block");
        let back = fuse_backward(fusion, &out.cache, &d_fused, labels)?;
        grads.add_fusion_gradients(&back.params, 1.0);
    }
    Ok((state.eval, grads))
}

/// Per-epoch training log entry. `train_loss` is the mean total loss;
/// `attention_loss` is averaged over all examples, counting
/// unsupervised ones as zero, so the three loss columns stay additive.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub answer_loss: f64,
    pub attention_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot at the best validation accuracy (earliest epoch on
    /// ties); the initial parameters when `epochs` is zero.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Mean VQA accuracy of greedy (argmax) predictions over `examples`.
pub(crate) fn validation_accuracy(
    params: &EncoderParameters,
    examples: &[EncoderExample],
    vocab: &AnswerVocabulary,
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ex in examples {
        let eval = example_loss(params, ex)?;
        let idx = argmax(&eval.logits);
        total += vqa_accuracy(&vocab.entries[idx], &ex.answers);
    }
    Ok(total / examples.len() as f64)
}

/// First index with the maximal value (strict comparison, so ties go
/// to the earliest entry).
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Train from freshly initialized parameters.
pub fn train(
    train_set: &[EncoderExample],
    val_set: &[EncoderExample],
    config: &ModelConfig,
    tokenizer: &Tokenizer,
    vocab: &AnswerVocabulary,
) -> Result<TrainOutcome> {
    config.validate()?;
    let params = EncoderParameters::new(config, tokenizer.n_tokens(), vocab.len())?;
    train_from(params, train_set, val_set, config, tokenizer, vocab)
}

fn snapshot(
    params: &EncoderParameters,
    tokenizer: &Tokenizer,
    vocab: &AnswerVocabulary,
    epoch: usize,
    val_accuracy: f64,
    rng: &ChaCha8Rng,
) -> Checkpoint {
    Checkpoint {
        params: params.clone(),
        tokenizer: tokenizer.clone(),
        vocab: vocab.clone(),
        epoch,
        val_accuracy,
        rng_seed: params.config.seed,
        rng_word_pos: rng.get_word_pos(),
        optimizer: "sgd".to_string(),
    }
}

fn train_from(
    mut params: EncoderParameters,
    train_set: &[EncoderExample],
    val_set: &[EncoderExample],
    config: &ModelConfig,
    tokenizer: &Tokenizer,
    vocab: &AnswerVocabulary,
) -> Result<TrainOutcome> {
    if train_set.is_empty() && config.epochs > 0 {
        return Err(Error::validation("cannot train on an empty example set"));
    }
    // Separate stream from parameter initialization so adding epochs
    // never perturbs the initial weights.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5851_f42d_4c95_7f2d);

    if config.epochs == 0 {
        let val_acc = validation_accuracy(&params, val_set, vocab)?;
        log::info!("epochs = 0: emitting the initialization checkpoint");
        return Ok(TrainOutcome {
            checkpoint: snapshot(&params, tokenizer, vocab, 0, val_acc, &rng),
            log: Vec::new(),
        });
    }

    let group_size = config.batch_size * config.grad_accum;
    let mut grad = params.zeros_like();
    let mut indices: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<Checkpoint> = None;

    for epoch in 1..=config.epochs {
        indices.shuffle(&mut rng);
        let mut group_count = 0usize;
        let mut sum_total = 0.0;
        let mut sum_answer = 0.0;
        let mut sum_attention = 0.0;
        for &idx in &indices {
            let ex = &train_set[idx];
            let (eval, g) = example_gradients(&params, ex)?;
            if !eval.total_loss.is_finite() || eval.logits.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!(
                    "training diverged at epoch {epoch} on example {} (loss {}); \
                     lower learning_rate or check the inputs",
                    ex.question_id, eval.total_loss
                )));
            }
            sum_total += eval.total_loss;
            sum_answer += eval.answer_loss;
            sum_attention += eval.attention_loss.unwrap_or(0.0);
            grad.add_scaled(&g, 1.0);
            group_count += 1;
            if group_count == group_size {
                params.add_scaled(&grad, -config.learning_rate / group_count as f64);
                grad.for_each_tensor_mut(|_, m| m.fill(0.0));
                group_count = 0;
            }
        }
        if group_count > 0 {
            params.add_scaled(&grad, -config.learning_rate / group_count as f64);
            grad.for_each_tensor_mut(|_, m| m.fill(0.0));
        }

        let n = train_set.len() as f64;
        let val_acc = validation_accuracy(&params, val_set, vocab)?;
        let entry = EpochLog {
            epoch,
            train_loss: sum_total / n,
            answer_loss: sum_answer / n,
            attention_loss: sum_attention / n,
            val_accuracy: val_acc,
        };
        if !entry.train_loss.is_finite() {
            return Err(Error::validation(format!(
                "training diverged at epoch {epoch} (mean loss {}); lower learning_rate",
                entry.train_loss
            )));
        }
        log::info!(
            "epoch {epoch}: train_loss {:.4} answer {:.4} attention {:.4} val_accuracy {:.4}",
            entry.train_loss,
            entry.answer_loss,
            entry.attention_loss,
            entry.val_accuracy
        );
        let improved = best
            .as_ref()
            .map(|b| val_acc > b.val_accuracy)
            .unwrap_or(true);
        if improved {
            best = Some(snapshot(&params, tokenizer, vocab, epoch, val_acc, &rng));
        }
        log.push(entry);
    }

    Ok(TrainOutcome {
        checkpoint: best.expect("at least one epoch ran"),
        log,
    })
}

/// Continue training from a saved checkpoint's weights under a new
/// configuration. Tensors whose name and shape match are copied; the
/// rest (for example a fusion block absent from the trunk) keep their
/// fresh seeded initialization. The checkpoint must carry the same
/// token and answer vocabularies as the new run.
pub fn finetune_from(
    pretrained: &Checkpoint,
    train_set: &[EncoderExample],
    val_set: &[EncoderExample],
    config: &ModelConfig,
    tokenizer: &Tokenizer,
    vocab: &AnswerVocabulary,
) -> Result<TrainOutcome> {
    config.validate()?;
    if pretrained.tokenizer.words() != tokenizer.words() {
        return Err(Error::validation(
            "pretrained checkpoint token vocabulary does not match this run; \
             rebuild both from the same corpus",
        ));
    }
    if pretrained.vocab != *vocab {
        return Err(Error::validation(
            "pretrained checkpoint answer vocabulary does not match this run; \
             rebuild both from the same corpus",
        ));
    }
    let mut warm = EncoderParameters::new(config, tokenizer.n_tokens(), vocab.len())?;
    let mut donor: std::collections::BTreeMap<String, crate::linalg::Mat> =
        std::collections::BTreeMap::new();
    pretrained.params.for_each_tensor(|name, m| {
        donor.insert(name.to_string(), m.clone());
    });
    let mut copied = 0usize;
    warm.for_each_tensor_mut(|name, m| {
        if let Some(src) = donor.get(name) {
            if src.rows == m.rows && src.cols == m.cols {
                m.data.copy_from_slice(&src.data);
                copied += 1;
            }
        }
    });
    if copied == 0 {
        return Err(Error::validation(
            "no pretrained tensors matched the finetune configuration; \
             the model sizes are incompatible",
        ));
    }
    train_from(warm, train_set, val_set, config, tokenizer, vocab)
}

/// Two-stage training: first the knowledge-free trunk, then the
/// configured fusion mode warm-started from it. With an empty pretrain
/// set this degrades to plain training (with a warning); with zero
/// finetune epochs the pretrained checkpoint is returned as-is.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_then_finetune(
    pretrain_train: &[EncoderExample],
    pretrain_val: &[EncoderExample],
    finetune_train: &[EncoderExample],
    finetune_val: &[EncoderExample],
    config: &ModelConfig,
    pretrain_epochs: usize,
    tokenizer: &Tokenizer,
    vocab: &AnswerVocabulary,
) -> Result<TrainOutcome> {
    if pretrain_train.is_empty() {
        log::warn!("pretrain set is empty; falling back to single-stage training");
        return train(finetune_train, finetune_val, config, tokenizer, vocab);
    }
    let mut pre_cfg = *config;
    pre_cfg.fusion_mode = FusionMode::None;
    pre_cfg.epochs = pretrain_epochs;
    let pretrained = train(pretrain_train, pretrain_val, &pre_cfg, tokenizer, vocab)?;
    if config.epochs == 0 {
        return Ok(pretrained);
    }
    finetune_from(
        &pretrained.checkpoint,
        finetune_train,
        finetune_val,
        config,
        tokenizer,
        vocab,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::QuestionRecord;
    use crate::corpus::Split;
    use rand::Rng;

    fn tiny_config(mode: FusionMode, epochs: usize) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            layers: 1,
            heads: 2,
            ffn: 16,
            k: 2,
            fusion_mode: mode,
            supervision_fraction: 1.0,
            batch_size: 4,
            grad_accum: 2,
            epochs,
            learning_rate: 0.05,
            max_len: 24,
            sentence_dim: 6,
            seed: 11,
        }
    }

    fn fixture_vocab() -> (Tokenizer, AnswerVocabulary) {
        let tokenizer = Tokenizer::build(
            [
                "is the stove hot or cold",
                "what do you open with a key",
                "umbrella rain door lock stove heat",
            ]
            .iter()
            .copied(),
        );
        let records: Vec<QuestionRecord> = ["hot", "cold", "door", "rain"]
            .iter()
            .map(|a| QuestionRecord {
                question_id: format!("v-{a}"),
                image_id: "img".into(),
                question: "seed".into(),
                answers: vec![AnswerCount {
                    answer: (*a).to_string(),
                    count: 10,
                }],
                split: Split::Train,
            })
            .collect();
        let vocab = AnswerVocabulary::build(&records, 10);
        (tokenizer, vocab)
    }

    /// Deterministic toy task: the answer is recoverable from the
    /// question tokens, so a few epochs must push accuracy up.
    fn toy_examples(
        mode: FusionMode,
        tokenizer: &Tokenizer,
        vocab: &AnswerVocabulary,
        n: usize,
        seed: u64,
        supervised: bool,
    ) -> Vec<EncoderExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let answers = ["hot", "cold", "door", "rain"];
        (0..n)
            .map(|i| {
                let answer = answers[i % answers.len()];
                let text = match answer {
                    "hot" => "is the stove hot",
                    "cold" => "is the stove cold",
                    "door" => "what do you open",
                    _ => "what falls with umbrella",
                };
                let question_tokens = tokenizer.encode(text);
                let ac = vec![AnswerCount {
                    answer: answer.to_string(),
                    count: 10,
                }];
                let target = vocab.target_distribution(&ac);
                let commonsense = match mode {
                    FusionMode::None => CommonsenseInput::None,
                    FusionMode::Tokens => {
                        CommonsenseInput::Tokens(tokenizer.encode(answer))
                    }
                    FusionMode::Linear => CommonsenseInput::Linear(vec![
                        (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                    ]),
                    FusionMode::Mha => {
                        // Candidate 0 carries a stable answer-specific
                        // pattern; candidate 1 is noise.
                        let mut signal = vec![0.0; 6];
                        signal[answers.iter().position(|a| *a == answer).unwrap()] = 1.0;
                        let noise: Vec<f64> =
                            (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect();
                        CommonsenseInput::Mha {
                            question: (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                            candidates: vec![signal, noise],
                            labels: vec![0.8 / 0.9, 0.05 / 0.9, 0.05 / 0.9],
                        }
                    }
                };
                EncoderExample {
                    question_id: format!("t{i}"),
                    question_text: text.to_string(),
                    question_tokens,
                    regions: Vec::new(),
                    sentences: Vec::new(),
                    commonsense,
                    target,
                    answers: ac,
                    supervised,
                }
            })
            .collect()
    }

    #[test]
    fn zero_epochs_returns_initialization_checkpoint() {
        let (tokenizer, vocab) = fixture_vocab();
        let cfg = tiny_config(FusionMode::None, 0);
        let examples = toy_examples(FusionMode::None, &tokenizer, &vocab, 8, 1, false);
        let out = train(&examples, &examples, &cfg, &tokenizer, &vocab).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.checkpoint.epoch, 0);
        let fresh = EncoderParameters::new(&cfg, tokenizer.n_tokens(), vocab.len()).unwrap();
        assert_eq!(out.checkpoint.params, fresh);
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let (tokenizer, vocab) = fixture_vocab();
        let cfg = tiny_config(FusionMode::Mha, 2);
        let examples = toy_examples(FusionMode::Mha, &tokenizer, &vocab, 12, 2, true);
        let a = train(&examples, &examples, &cfg, &tokenizer, &vocab).unwrap();
        let b = train(&examples, &examples, &cfg, &tokenizer, &vocab).unwrap();
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
        assert_eq!(a.log.len(), b.log.len());
        for (x, y) in a.log.iter().zip(&b.log) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(x.val_accuracy.to_bits(), y.val_accuracy.to_bits());
        }
    }

    #[test]
    fn loss_decreases_on_learnable_toy_task() {
        let (tokenizer, vocab) = fixture_vocab();
        let mut cfg = tiny_config(FusionMode::None, 40);
        cfg.learning_rate = 0.1;
        cfg.batch_size = 1;
        cfg.grad_accum = 1;
        let examples = toy_examples(FusionMode::None, &tokenizer, &vocab, 16, 3, false);
        let out = train(&examples, &examples, &cfg, &tokenizer, &vocab).unwrap();
        let first = out.log.first().unwrap().train_loss;
        let last = out.log.last().unwrap().train_loss;
        assert!(
            last < first,
            "loss should fall on a learnable task: {first} -> {last}"
        );
        assert!(out.log.last().unwrap().val_accuracy > 0.5);
    }

    #[test]
    fn unsupervised_examples_have_no_attention_loss() {
        let (tokenizer, vocab) = fixture_vocab();
        let cfg = tiny_config(FusionMode::Mha, 1);
        let params = EncoderParameters::new(&cfg, tokenizer.n_tokens(), vocab.len()).unwrap();
        let supervised = toy_examples(FusionMode::Mha, &tokenizer, &vocab, 2, 4, true);
        let unsupervised = toy_examples(FusionMode::Mha, &tokenizer, &vocab, 2, 4, false);
        let with = example_loss(&params, &supervised[0]).unwrap();
        let without = example_loss(&params, &unsupervised[0]).unwrap();
        assert!(with.attention_loss.is_some());
        assert!(without.attention_loss.is_none());
        assert!((with.total_loss - with.answer_loss - with.attention_loss.unwrap()).abs() < 1e-12);
        assert!((without.total_loss - without.answer_loss).abs() < 1e-12);
        // Same forward signal either way.
        assert_eq!(with.logits, without.logits);
    }

    #[test]
    fn mode_mismatch_is_rejected_with_context() {
        let (tokenizer, vocab) = fixture_vocab();
        let cfg = tiny_config(FusionMode::Mha, 1);
        let params = EncoderParameters::new(&cfg, tokenizer.n_tokens(), vocab.len()).unwrap();
        let examples = toy_examples(FusionMode::None, &tokenizer, &vocab, 1, 5, false);
        let err = example_loss(&params, &examples[0]).unwrap_err();
        assert!(err.to_string().contains("fusion mode"));
    }

    /// Full-model finite-difference check, mha mode with attention
    /// supervision: every parameter including the fusion block.
    #[test]
    fn full_gradient_matches_finite_differences_mha() {
        for seed in [5u64, 6] {
            let (tokenizer, vocab) = fixture_vocab();
            let mut cfg = tiny_config(FusionMode::Mha, 1);
            cfg.seed = seed;
            let params =
                EncoderParameters::new(&cfg, tokenizer.n_tokens(), vocab.len()).unwrap();
            let ex = toy_examples(FusionMode::Mha, &tokenizer, &vocab, 1, seed, true)
                .remove(0);
            let (_, grads) = example_gradients(&params, &ex).unwrap();
            let mut flat = Vec::new();
            grads.for_each_tensor(|_, m| flat.extend_from_slice(&m.data));
            let mut names = Vec::new();
            params.for_each_tensor(|name, m| names.push((name.to_string(), m.len())));
            let h = 1e-5;
            let mut coord = 0;
            for (name, len) in names {
                for offset in 0..len {
                    let mut plus = params.clone();
                    plus.for_each_tensor_mut(|n2, m| {
                        if n2 == name {
                            m.data[offset] += h;
                        }
                    });
                    let mut minus = params.clone();
                    minus.for_each_tensor_mut(|n2, m| {
                        if n2 == name {
                            m.data[offset] -= h;
                        }
                    });
                    let lp = example_loss(&plus, &ex).unwrap().total_loss;
                    let lm = example_loss(&minus, &ex).unwrap().total_loss;
                    let numeric = (lp - lm) / (2.0 * h);
                    let analytic = flat[coord];
                    let diff = (numeric - analytic).abs();
                    assert!(
                        diff <= 1e-4 * numeric.abs().max(analytic.abs()) || diff <= 1e-7,
                        "seed {seed} {name}[{offset}]: analytic {analytic} vs numeric {numeric}"
                    );
                    coord += 1;
                }
            }
            assert_eq!(coord, flat.len());
        }
    }

    #[test]
    fn best_checkpoint_prefers_earliest_on_ties() {
        let (tokenizer, vocab) = fixture_vocab();
        // Saturating toy task: accuracy hits its maximum early and
        // plateaus, so the retained epoch must be the first of the tie.
        let cfg = tiny_config(FusionMode::None, 10);
        let examples = toy_examples(FusionMode::None, &tokenizer, &vocab, 16, 7, false);
        let out = train(&examples, &examples, &cfg, &tokenizer, &vocab).unwrap();
        let best_acc = out.checkpoint.val_accuracy;
        let first_hit = out
            .log
            .iter()
            .find(|e| e.val_accuracy >= best_acc)
            .unwrap()
            .epoch;
        assert_eq!(out.checkpoint.epoch, first_hit);
    }

    #[test]
    fn divergence_aborts_with_diagnostic() {
        let (tokenizer, vocab) = fixture_vocab();
        let mut cfg = tiny_config(FusionMode::None, 5);
        // The layer norms keep merely-large weights finite, so force
        // genuine overflow: after one 1e200-sized step the attention
        // scores overflow and the next example's loss is NaN.
        cfg.learning_rate = 1e200;
        let examples = toy_examples(FusionMode::None, &tokenizer, &vocab, 16, 8, false);
        let err = train(&examples, &examples, &cfg, &tokenizer, &vocab).unwrap_err();
        assert!(err.to_string().contains("diverged"), "got: {err}");
    }

    #[test]
    fn finetune_reuses_trunk_and_rejects_foreign_vocabularies() {
        let (tokenizer, vocab) = fixture_vocab();
        let pre_cfg = tiny_config(FusionMode::None, 2);
        let pre_examples = toy_examples(FusionMode::None, &tokenizer, &vocab, 8, 9, false);
        let pretrained = train(&pre_examples, &pre_examples, &pre_cfg, &tokenizer, &vocab)
            .unwrap();

        let fine_cfg = tiny_config(FusionMode::Mha, 1);
        let fine_examples = toy_examples(FusionMode::Mha, &tokenizer, &vocab, 8, 10, true);
        let out = finetune_from(
            &pretrained.checkpoint,
            &fine_examples,
            &fine_examples,
            &fine_cfg,
            &tokenizer,
            &vocab,
        )
        .unwrap();
        assert!(out.checkpoint.params.fusion.is_some());

        let other_tokenizer = Tokenizer::build(["entirely different words"].iter().copied());
        let err = finetune_from(
            &pretrained.checkpoint,
            &fine_examples,
            &fine_examples,
            &fine_cfg,
            &other_tokenizer,
            &vocab,
        )
        .unwrap_err();
        assert!(err.to_string().contains("vocabulary"), "got: {err}");
    }

    #[test]
    fn empty_pretrain_falls_back_to_plain_training() {
        let (tokenizer, vocab) = fixture_vocab();
        let cfg = tiny_config(FusionMode::None, 2);
        let examples = toy_examples(FusionMode::None, &tokenizer, &vocab, 8, 11, false);
        let staged =
            pretrain_then_finetune(&[], &[], &examples, &examples, &cfg, 2, &tokenizer, &vocab)
                .unwrap();
        let plain = train(&examples, &examples, &cfg, &tokenizer, &vocab).unwrap();
        assert_eq!(staged.checkpoint.params, plain.checkpoint.params);
    }
}

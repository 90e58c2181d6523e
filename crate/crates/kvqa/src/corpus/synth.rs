//! Seeded synthetic corpus generator.
//!
//! The generator plants two kinds of questions:
//!
//! * direct questions whose answer is readable off the input — either
//!   the most confident object tag or a word mentioned in the question —
//!   so a bag-of-tokens model can solve them from the record alone;
//! * knowledge questions whose answer is a planted fact keyed by the
//!   pictured (object, companion prop, relation) triple and stored only
//!   in the emitted stub knowledge table. Because the same object
//!   carries a different answer next to a different prop, there is no
//!   stable object-to-answer mapping to memorize; test and validation
//!   splits draw from triples never used in training, so the answer
//!   must flow through the knowledge channel.
//!
//! Stub tails are padded so every verbalized sentence is exactly
//! [`SENTENCE_WORDS`] words. Five selected sentences therefore fill most
//! of a 64-slot input when passed through as raw tokens, crowding out
//! region and question tokens, whereas fusing them into embeddings
//! leaves the rest of the sequence intact — the capacity trade-off the
//! fusion ablation measures.
//!
//! Everything is derived from one seed; identical configs produce
//! byte-identical artifacts.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::knowledge::{StubEntry, StubTable};
use crate::{Error, Result};

use super::{AnswerCount, Dataset, ObjectTag, QuestionRecord, Split};

/// Object labels that carry planted facts and appear as detector tags.
const OBJECTS: [&str; 24] = [
    "umbrella", "kettle", "hammer", "scarf", "lantern", "wagon", "whistle", "basket", "ladder",
    "mirror", "cushion", "barrel", "trumpet", "jacket", "shovel", "candle", "helmet", "teapot",
    "drum", "blanket", "anchor", "broom", "goggles", "satchel",
];

/// Scene props used as distractor tags; no facts are planted for them.
const PROPS: [&str; 12] = [
    "table", "window", "fence", "cloud", "door", "carpet", "ceiling", "pavement", "hedge",
    "puddle", "bench", "curtain",
];

/// The relations facts are planted for, each with a fixed question
/// phrasing whose tokens overlap the relation's verbalization template.
const PLANTED_RELATIONS: [(&str, &str); 5] = [
    ("UsedFor", "What is this item used for?"),
    ("AtLocation", "Where would you be likely to find this?"),
    ("MadeUpOf", "What is this item made of?"),
    ("CapableOf", "What is this item capable of?"),
    ("IsA", "What type of thing is this?"),
];

/// Every verbalized stub sentence is exactly this many words. Five
/// selected inferences then fill 5 x 11 = 55 slots of the default
/// 64-slot input, so feeding sentences through as raw tokens forces the
/// region and most question tokens out of the sequence, while the
/// embedding-based fusion modes keep them.
const SENTENCE_WORDS: usize = 11;

/// Continuations appended after the planted answer, per relation in
/// [`PLANTED_RELATIONS`] order, sized so the verbalized sentence comes
/// out at [`SENTENCE_WORDS`] words. Within a relation no continuation
/// word recurs in [`FILLER_TAILS`], keeping the filler's token overlap
/// with the answer-bearing sentence at the template-plus-head floor.
const ANSWER_CONTINUATIONS: [[&str; 6]; 5] = [
    [
        "once the busy season starts",
        "when regular supplies run short",
        "before the first frost arrives",
        "during long afternoons of work",
        "after every heavy morning routine",
        "while the older stock rests",
    ],
    [
        "most mornings",
        "on weekdays",
        "after sunset",
        "during storms",
        "near noon",
        "in spring",
    ],
    [
        "pressed into thin layers",
        "bound with simple stitching",
        "treated against damp air",
        "shaped by steady hands",
        "layered over coarse webbing",
        "cured in warm rooms",
    ],
    [
        "even when conditions turn rough",
        "for hours without any pause",
        "whenever someone gives it room",
        "despite many seasons in service",
        "long after its prime passes",
        "under surprisingly heavy daily strain",
    ],
    [
        "prized by patient collectors",
        "seen at village fairs",
        "common in older households",
        "known across several trades",
        "favored by traveling crews",
        "typical around rural workshops",
    ],
];

/// Answer pools per planted relation, in [`PLANTED_RELATIONS`] order.
const ANSWER_POOLS: [[&str; 8]; 5] = [
    ["digging", "cutting", "cooking", "writing", "cleaning", "painting", "measuring", "climbing"],
    ["kitchen", "garage", "forest", "museum", "harbor", "bakery", "stadium", "library"],
    ["copper", "rubber", "leather", "ceramic", "bamboo", "wool", "glass", "steel"],
    ["floating", "spinning", "folding", "bouncing", "glowing", "stretching", "ringing", "rolling"],
    ["tool", "container", "garment", "instrument", "ornament", "appliance", "vehicle", "toy"],
];

/// Filler tails planted below the true answer so selection and fusion
/// see same-relation distractors, per relation in [`PLANTED_RELATIONS`]
/// order and sized to [`SENTENCE_WORDS`] like the answer tails. Their
/// words are disjoint from the same relation's continuations, which
/// keeps the filler under the dedup threshold everywhere except
/// AtLocation, whose long template collapses filler into answer.
const FILLER_TAILS: [[&str; 6]; 5] = [
    [
        "sorting mismatched buttons into tin rows",
        "propping cellar hatches against stiff drafts",
        "bundling dried stems beneath garden eaves",
        "wedging crooked shelves back into line",
        "coaxing stubborn latches past their catch",
        "steadying wobbly carts along gravel paths",
    ],
    [
        "behind rusted stairs",
        "beside cracked flagstones",
        "under sagging awnings",
        "past derelict kiosks",
        "inside vacant stalls",
        "among stacked pallets",
    ],
    [
        "salvaged remnants from estate sales",
        "offcuts gathered across repair benches",
        "surplus batches nobody ever claimed",
        "mixed scraps sold as seconds",
        "leftover stock marked far down",
        "odd lots traded between dealers",
    ],
    [
        "supporting twice advertised load ratings easily",
        "resisting casual knocks plus minor spills",
        "surviving clumsy handling by careless renters",
        "managing chores most gadgets cannot touch",
        "matching pricier models across most tasks",
        "outlasting cheaper rivals sold elsewhere today",
    ],
    [
        "oddity from some bygone catalog",
        "novelty rarely stocked anymore anywhere",
        "curiosity dealers mention only offhand",
        "relic predating most modern equivalents",
        "staple every trade school teaches",
        "fixture no serious workshop skips",
    ],
];

const DIRECT_TAG_QUESTION: &str = "What object is shown in the picture?";

/// How many annotators every synthetic record has; all agree.
const ANNOTATION_COUNT: u32 = 10;

/// Parameters of the generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Probability that a record is a knowledge question.
    pub knowledge_strength: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            n_train: 2000,
            n_val: 300,
            n_test: 500,
            knowledge_strength: 0.8,
        }
    }
}

/// Generation summary written next to the corpus files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub knowledge_strength: f64,
    pub annotation_count: u32,
    /// Length, in words, of every verbalized stub sentence.
    pub sentence_words: usize,
    /// Question text used for each planted relation; a record is a
    /// knowledge question exactly when its text appears here.
    pub relation_questions: BTreeMap<String, String>,
    /// Accuracy the best constant-per-relation guesser reaches on the
    /// planted test questions (the "knowledge withheld" ceiling).
    pub planted_chance_rate: f64,
    pub planted_per_split: BTreeMap<String, usize>,
    pub direct_per_split: BTreeMap<String, usize>,
}

/// Generated corpus: three splits, detector tags, the stub knowledge
/// table and the manifest.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub tags: BTreeMap<String, Vec<ObjectTag>>,
    pub stub: StubTable,
    pub manifest: SynthManifest,
}

impl SynthOutput {
    /// Write all artifacts into `dir` with fixed file names.
    pub fn write(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        super::save_dataset(&dir.join("train.json"), &self.train)?;
        super::save_dataset(&dir.join("val.json"), &self.val)?;
        super::save_dataset(&dir.join("test.json"), &self.test)?;
        let tags_path = dir.join("tags.json");
        let tags = serde_json::to_string_pretty(&self.tags).expect("tags serialize");
        std::fs::write(&tags_path, tags + "\n").map_err(|e| Error::io(&tags_path, e))?;
        self.stub.save(&dir.join("stub_knowledge.json"))?;
        let manifest_path = dir.join("manifest.json");
        let manifest = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&manifest_path, manifest + "\n").map_err(|e| Error::io(&manifest_path, e))
    }
}

/// One planted fact: this object next to this prop, under this
/// relation, has this answer.
struct FactTable {
    /// answer[relation_idx][object_idx][prop_idx]
    answers: Vec<Vec<Vec<&'static str>>>,
    /// (relation_idx, object_idx, prop_idx) triples available to the
    /// training split.
    train_triples: Vec<(usize, usize, usize)>,
    /// Triples reserved for validation and test.
    heldout_triples: Vec<(usize, usize, usize)>,
}

/// Assign answers cyclically over shuffled (object, prop) combinations
/// so every pool answer is used equally often, then hold out one sixth
/// of the combinations per relation for validation and test. Every
/// answer class keeps dozens of training uses, so it stays
/// in-vocabulary regardless of the holdout draw.
fn build_fact_table(rng: &mut ChaCha8Rng) -> FactTable {
    let mut answers = Vec::with_capacity(PLANTED_RELATIONS.len());
    let mut train_triples = Vec::new();
    let mut heldout_triples = Vec::new();
    for (rel_idx, pool) in ANSWER_POOLS.iter().enumerate() {
        let mut combos: Vec<(usize, usize)> = (0..OBJECTS.len())
            .flat_map(|o| (0..PROPS.len()).map(move |p| (o, p)))
            .collect();
        combos.shuffle(rng);
        let mut per_combo = vec![vec![""; PROPS.len()]; OBJECTS.len()];
        let heldout = combos.len() / 6;
        for (slot, &(obj_idx, prop_idx)) in combos.iter().enumerate() {
            per_combo[obj_idx][prop_idx] = pool[slot % pool.len()];
            if slot < heldout {
                heldout_triples.push((rel_idx, obj_idx, prop_idx));
            } else {
                train_triples.push((rel_idx, obj_idx, prop_idx));
            }
        }
        answers.push(per_combo);
    }
    FactTable {
        answers,
        train_triples,
        heldout_triples,
    }
}

fn build_stub_table(facts: &FactTable, rng: &mut ChaCha8Rng) -> StubTable {
    let mut entries = Vec::new();
    for (obj_idx, object) in OBJECTS.iter().enumerate() {
        for (prop_idx, prop) in PROPS.iter().enumerate() {
            for (rel_idx, (relation, _)) in PLANTED_RELATIONS.iter().enumerate() {
                let answer = facts.answers[rel_idx][obj_idx][prop_idx];
                let continuation =
                    ANSWER_CONTINUATIONS[rel_idx][rng.gen_range(0..ANSWER_CONTINUATIONS[rel_idx].len())];
                let filler = FILLER_TAILS[rel_idx][rng.gen_range(0..FILLER_TAILS[rel_idx].len())];
                entries.push(StubEntry {
                    pattern: format!("{object} {prop}"),
                    relation: (*relation).to_string(),
                    tails: vec![format!("{answer} {continuation}"), filler.to_string()],
                });
            }
        }
    }
    StubTable::new(entries)
}

fn random_bbox(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let x1: f64 = rng.gen_range(0.0..0.55);
    let y1: f64 = rng.gen_range(0.0..0.55);
    let x2 = (x1 + rng.gen_range(0.1..0.4)).min(1.0);
    let y2 = (y1 + rng.gen_range(0.1..0.4)).min(1.0);
    [x1, y1, x2, y2]
}

/// Tags for one image: the key object at high confidence, the scene's
/// companion prop below it, and sometimes a third low-confidence prop.
/// The top-two ordering is what exposes the (object, prop) pair to the
/// question–object phrase.
fn make_tags(key_object: &str, companion: &str, rng: &mut ChaCha8Rng) -> Vec<ObjectTag> {
    let mut tags = vec![ObjectTag {
        label: key_object.to_string(),
        confidence: rng.gen_range(0.80..0.98),
        bbox: random_bbox(rng),
    }];
    tags.push(ObjectTag {
        label: companion.to_string(),
        confidence: rng.gen_range(0.40..0.75),
        bbox: random_bbox(rng),
    });
    if rng.gen_bool(0.5) {
        let extra = PROPS[rng.gen_range(0..PROPS.len())];
        tags.push(ObjectTag {
            label: extra.to_string(),
            confidence: rng.gen_range(0.15..0.38),
            bbox: random_bbox(rng),
        });
    }
    tags
}

fn unanimous(answer: &str) -> Vec<AnswerCount> {
    vec![AnswerCount {
        answer: answer.to_string(),
        count: ANNOTATION_COUNT,
    }]
}

/// Generate the corpus. Deterministic in `config`.
pub fn generate_synthetic_corpus(config: &SynthConfig) -> Result<SynthOutput> {
    if !(0.0..=1.0).contains(&config.knowledge_strength) {
        return Err(Error::Config(format!(
            "knowledge_strength must lie in [0, 1], got {}",
            config.knowledge_strength
        )));
    }
    if config.n_train == 0 {
        return Err(Error::Config("n_train must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let facts = build_fact_table(&mut rng);
    let stub = build_stub_table(&facts, &mut rng);

    let mut tags: BTreeMap<String, Vec<ObjectTag>> = BTreeMap::new();
    let mut planted_per_split: BTreeMap<String, usize> = BTreeMap::new();
    let mut direct_per_split: BTreeMap<String, usize> = BTreeMap::new();
    // Majority bookkeeping for the chance rate on planted test records.
    let mut test_planted_by_relation: Vec<BTreeMap<&str, usize>> =
        vec![BTreeMap::new(); PLANTED_RELATIONS.len()];

    let splits = [
        (Split::Train, "tr", config.n_train),
        (Split::Val, "va", config.n_val),
        (Split::Test, "te", config.n_test),
    ];
    let mut datasets: Vec<Dataset> = Vec::new();

    for (split, prefix, n) in splits {
        let mut records = Vec::with_capacity(n);
        let mut planted = 0usize;
        let mut direct = 0usize;
        for i in 0..n {
            let question_id = format!("{prefix}{i:05}");
            let image_id = format!("img_{question_id}");
            let knowledge_question = rng.gen_bool(config.knowledge_strength);
            let record = if knowledge_question {
                planted += 1;
                let pool = if split == Split::Train {
                    &facts.train_triples
                } else {
                    &facts.heldout_triples
                };
                let (rel_idx, obj_idx, prop_idx) = pool[rng.gen_range(0..pool.len())];
                let object = OBJECTS[obj_idx];
                let answer = facts.answers[rel_idx][obj_idx][prop_idx];
                if split == Split::Test {
                    *test_planted_by_relation[rel_idx].entry(answer).or_insert(0) += 1;
                }
                tags.insert(
                    image_id.clone(),
                    make_tags(object, PROPS[prop_idx], &mut rng),
                );
                QuestionRecord {
                    question_id,
                    image_id,
                    question: PLANTED_RELATIONS[rel_idx].1.to_string(),
                    answers: unanimous(answer),
                    split,
                }
            } else {
                direct += 1;
                let key_object = OBJECTS[rng.gen_range(0..OBJECTS.len())];
                let companion = PROPS[rng.gen_range(0..PROPS.len())];
                tags.insert(image_id.clone(), make_tags(key_object, companion, &mut rng));
                if rng.gen_bool(0.5) {
                    // Answer is the most confident tag label.
                    QuestionRecord {
                        question_id,
                        image_id,
                        question: DIRECT_TAG_QUESTION.to_string(),
                        answers: unanimous(key_object),
                        split,
                    }
                } else {
                    // Answer is a word mentioned in the question itself.
                    let mentioned = OBJECTS[rng.gen_range(0..OBJECTS.len())];
                    QuestionRecord {
                        question_id,
                        image_id,
                        question: format!(
                            "Which item does this question mention, the {mentioned}?"
                        ),
                        answers: unanimous(mentioned),
                        split,
                    }
                }
            };
            records.push(record);
        }
        let split_name = match split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        planted_per_split.insert(split_name.to_string(), planted);
        direct_per_split.insert(split_name.to_string(), direct);
        records.sort_by(|a, b| a.question_id.cmp(&b.question_id));
        datasets.push(Dataset {
            annotation_count: ANNOTATION_COUNT,
            records,
        });
    }

    let planted_test_total: usize = test_planted_by_relation
        .iter()
        .map(|m| m.values().sum::<usize>())
        .sum();
    let majority_total: usize = test_planted_by_relation
        .iter()
        .map(|m| m.values().max().copied().unwrap_or(0))
        .sum();
    let planted_chance_rate = if planted_test_total == 0 {
        0.0
    } else {
        majority_total as f64 / planted_test_total as f64
    };

    let manifest = SynthManifest {
        seed: config.seed,
        n_train: config.n_train,
        n_val: config.n_val,
        n_test: config.n_test,
        knowledge_strength: config.knowledge_strength,
        annotation_count: ANNOTATION_COUNT,
        sentence_words: SENTENCE_WORDS,
        relation_questions: PLANTED_RELATIONS
            .iter()
            .map(|(r, q)| (r.to_string(), q.to_string()))
            .collect(),
        planted_chance_rate,
        planted_per_split,
        direct_per_split,
    };

    let mut datasets = datasets.into_iter();
    Ok(SynthOutput {
        train: datasets.next().unwrap(),
        val: datasets.next().unwrap(),
        test: datasets.next().unwrap(),
        tags,
        stub,
        manifest,
    })
}

//! The run configuration: one JSON document governs every command.
//!
//! Flags override config fields; everything has a default, so an empty
//! document (or no `--config` at all) is a valid configuration. Every
//! section rejects unknown fields so typos surface as field-level
//! diagnostics instead of silently applying defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::ModelConfig;
use crate::knowledge::{DEFAULT_BEAM, DEFAULT_DEDUP_THRESHOLD};
use crate::selection::{DEFAULT_AUGMENT_EPOCHS, DEFAULT_EMBED_DIM};
use crate::{Error, Result};

/// Version stamped into every artifact's metadata.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Explicit input locations. Anything left unset resolves to a fixed
/// file name inside the output directory, so the commands chain without
/// configuration when they share one `out_dir`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub tags: Option<PathBuf>,
    /// Stub knowledge table (JSON).
    pub stub: Option<PathBuf>,
    /// Knowledge cache (JSONL); both read and appended by `knowledge`.
    pub cache: Option<PathBuf>,
    pub embedder: Option<PathBuf>,
    pub selected: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// When set, `eval` replays these saved predictions instead of
    /// running the model.
    pub predictions: Option<PathBuf>,
    /// Relation config (JSON); bundled defaults when unset.
    pub relations: Option<PathBuf>,
    /// Rephrase rule table (JSON); bundled defaults when unset.
    pub rephrase_rules: Option<PathBuf>,
    /// Stopword list (one word per line); bundled defaults when unset.
    pub stopwords: Option<PathBuf>,
    /// Directory of subset-filter word lists; bundled defaults when unset.
    pub word_lists: Option<PathBuf>,
}

/// Synthetic-corpus generator settings (the seed comes from the top
/// level of the config).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub knowledge_strength: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            n_train: 2000,
            n_val: 300,
            n_test: 500,
            knowledge_strength: 0.8,
        }
    }
}

/// Where inferences come from and how generation behaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnowledgeSourceKind {
    Stub,
    Cache,
    Service,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnowledgeSettings {
    pub source: KnowledgeSourceKind,
    /// Generation service base URL; required when `source` is "service".
    pub service_url: Option<String>,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    /// Tails requested per relation.
    pub beam: usize,
    /// Directed token-overlap threshold for within-relation dedup.
    pub dedup_threshold: f64,
}

impl Default for KnowledgeSettings {
    fn default() -> Self {
        KnowledgeSettings {
            source: KnowledgeSourceKind::Stub,
            service_url: None,
            timeout_secs: 10,
            max_in_flight: 4,
            beam: DEFAULT_BEAM,
            dedup_threshold: DEFAULT_DEDUP_THRESHOLD,
        }
    }
}

/// Sentence-embedder settings. With a service URL the remote embedder
/// is used as-is (no augmentation); otherwise a local embedder is
/// trained and saved by `select`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderSettings {
    pub dim: usize,
    pub augment_epochs: usize,
    pub augment_learning_rate: f64,
    pub service_url: Option<String>,
    pub timeout_secs: u64,
}

impl Default for EmbedderSettings {
    fn default() -> Self {
        EmbedderSettings {
            dim: DEFAULT_EMBED_DIM,
            augment_epochs: DEFAULT_AUGMENT_EPOCHS,
            augment_learning_rate: 0.1,
            service_url: None,
            timeout_secs: 10,
        }
    }
}

/// Training-stage settings that sit outside the model configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    /// Epochs of commonsense-free pretraining before the main run;
    /// zero trains in a single stage.
    pub pretrain_epochs: usize,
    /// Minimum annotator count for an answer to enter the vocabulary.
    pub answer_min_count: u32,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            pretrain_epochs: 0,
            answer_min_count: 10,
        }
    }
}

/// The whole run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; recorded into every artifact and overriding the
    /// model's own seed field.
    pub seed: u64,
    /// Every command writes its artifacts here.
    pub out_dir: PathBuf,
    pub paths: PathsConfig,
    pub synth: SynthSettings,
    pub knowledge: KnowledgeSettings,
    pub embedder: EmbedderSettings,
    pub train: TrainSettings,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out_dir: PathBuf::from("out"),
            paths: PathsConfig::default(),
            synth: SynthSettings::default(),
            knowledge: KnowledgeSettings::default(),
            embedder: EmbedderSettings::default(),
            train: TrainSettings::default(),
            model: ModelConfig::default(),
        }
    }
}

impl RunConfig {
    /// Load a config file; `None` yields the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let contents = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Config(format!("config file {} does not exist", path.display()))
            } else {
                Error::io(path, e)
            }
        })?;
        serde_json::from_str(&contents).map_err(|e| Error::json(path, &e))
    }

    /// Apply command-line overrides on top of the file values.
    pub fn apply_overrides(&mut self, seed: Option<u64>, out: Option<PathBuf>) {
        if let Some(seed) = seed {
            self.seed = seed;
        }
        if let Some(out) = out {
            self.out_dir = out;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.knowledge.beam == 0 {
            return Err(Error::Config("knowledge.beam must be positive".into()));
        }
        if !(self.knowledge.dedup_threshold > 0.0 && self.knowledge.dedup_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "knowledge.dedup_threshold must lie in (0, 1], got {}",
                self.knowledge.dedup_threshold
            )));
        }
        if self.knowledge.source == KnowledgeSourceKind::Service
            && self.knowledge.service_url.is_none()
        {
            return Err(Error::Config(
                "knowledge.service_url is required when knowledge.source is \"service\"".into(),
            ));
        }
        if self.embedder.dim == 0 {
            return Err(Error::Config("embedder.dim must be positive".into()));
        }
        let lr = self.embedder.augment_learning_rate;
        if !lr.is_finite() || lr <= 0.0 {
            return Err(Error::Config(format!(
                "embedder.augment_learning_rate must be a positive finite number, got {lr}"
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the effective (post-override) configuration.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn resolved(&self, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
        explicit
            .clone()
            .unwrap_or_else(|| self.out_dir.join(name))
    }

    pub fn train_path(&self) -> PathBuf {
        self.resolved(&self.paths.train, "train.json")
    }

    pub fn val_path(&self) -> PathBuf {
        self.resolved(&self.paths.val, "val.json")
    }

    pub fn test_path(&self) -> PathBuf {
        self.resolved(&self.paths.test, "test.json")
    }

    pub fn tags_path(&self) -> PathBuf {
        self.resolved(&self.paths.tags, "tags.json")
    }

    pub fn stub_path(&self) -> PathBuf {
        self.resolved(&self.paths.stub, "stub_knowledge.json")
    }

    pub fn cache_path(&self) -> PathBuf {
        self.resolved(&self.paths.cache, "cache.jsonl")
    }

    pub fn embedder_path(&self) -> PathBuf {
        self.resolved(&self.paths.embedder, "embedder.json")
    }

    pub fn selected_path(&self) -> PathBuf {
        self.resolved(&self.paths.selected, "selected.jsonl")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.resolved(&self.paths.checkpoint, "checkpoint.bin")
    }

    pub fn train_log_path(&self) -> PathBuf {
        self.out_dir.join("train_log.jsonl")
    }

    pub fn predictions_out_path(&self) -> PathBuf {
        self.out_dir.join("predictions.jsonl")
    }

    pub fn report_path(&self) -> PathBuf {
        self.out_dir.join("eval_report.json")
    }

    pub fn attention_path(&self) -> PathBuf {
        self.out_dir.join("attention.jsonl")
    }

    pub fn narrative_path(&self) -> PathBuf {
        self.out_dir.join("analysis.txt")
    }
}

/// Provenance stamped on every artifact: who wrote it, from which
/// effective configuration, with which seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub tool_version: String,
    pub config_digest: String,
    pub seed: u64,
}

impl ArtifactMeta {
    pub fn new(config: &RunConfig) -> Self {
        ArtifactMeta {
            tool_version: TOOL_VERSION.to_string(),
            config_digest: config.digest(),
            seed: config.seed,
        }
    }
}

/// Sidecar path for an artifact: `<file>.meta.json`.
pub fn meta_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.as_os_str().to_os_string();
    name.push(".meta.json");
    PathBuf::from(name)
}

/// Write an artifact's metadata sidecar.
pub fn write_meta(artifact: &Path, meta: &ArtifactMeta) -> Result<()> {
    let path = meta_path(artifact);
    let json = serde_json::to_string_pretty(meta).expect("meta serializes");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

/// Read an artifact's metadata sidecar; absent sidecars are `None`.
pub fn read_meta(artifact: &Path) -> Result<Option<ArtifactMeta>> {
    let path = meta_path(artifact);
    let contents = match std::fs::read_to_string(&path) {
        Ok(c) => c,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(&path, e)),
    };
    let meta = serde_json::from_str(&contents).map_err(|e| Error::json(&path, &e))?;
    Ok(Some(meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::FusionMode;

    #[test]
    fn empty_document_is_a_valid_config() {
        let config: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(config, RunConfig::default());
        config.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected_with_the_field_name() {
        let err: serde_json::Error =
            serde_json::from_str::<RunConfig>(r#"{"knowledge": {"beem": 3}}"#).unwrap_err();
        let message = Error::json(Path::new("inline"), &err).to_string();
        assert!(message.contains("beem"), "got: {message}");
        assert!(message.contains("line"), "diagnostic names the location: {message}");
    }

    #[test]
    fn overrides_change_the_digest() {
        let mut a = RunConfig::default();
        let b = a.clone();
        a.apply_overrides(Some(99), None);
        assert_ne!(a.digest(), b.digest());
        a.apply_overrides(Some(7), None);
        assert_eq!(a.digest(), b.digest(), "same effective config, same digest");
    }

    #[test]
    fn unset_paths_resolve_into_the_output_directory() {
        let mut config = RunConfig::default();
        config.apply_overrides(None, Some(PathBuf::from("/tmp/run")));
        assert_eq!(config.cache_path(), PathBuf::from("/tmp/run/cache.jsonl"));
        config.paths.cache = Some(PathBuf::from("/elsewhere/c.jsonl"));
        assert_eq!(config.cache_path(), PathBuf::from("/elsewhere/c.jsonl"));
    }

    #[test]
    fn service_source_requires_a_url() {
        let mut config = RunConfig::default();
        config.knowledge.source = KnowledgeSourceKind::Service;
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("service_url"), "got: {err}");
        config.knowledge.service_url = Some("http://localhost:1".into());
        config.validate().unwrap();
    }

    #[test]
    fn meta_sidecar_roundtrips_and_is_optional() {
        let dir = tempfile::tempdir().unwrap();
        let artifact = dir.path().join("thing.bin");
        assert_eq!(read_meta(&artifact).unwrap(), None);
        let meta = ArtifactMeta::new(&RunConfig::default());
        write_meta(&artifact, &meta).unwrap();
        assert_eq!(read_meta(&artifact).unwrap(), Some(meta));
        assert!(dir.path().join("thing.bin.meta.json").exists());
    }

    #[test]
    fn model_validation_is_part_of_config_validation() {
        let mut config = RunConfig::default();
        config.model.fusion_mode = FusionMode::Mha;
        config.model.heads = 3;
        config.model.d_model = 64; // not divisible by 3
        assert!(config.validate().is_err());
    }
}

//! Command-line pipeline: configuration loading, example assembly and
//! the six commands (synth, knowledge, select, train, eval, analyze).
//!
//! Every command reads one JSON configuration (flags override it),
//! writes its artifacts into the configured output directory and
//! stamps each artifact with the tool version, configuration digest
//! and seed so downstream commands can refuse mismatched inputs.

mod build;
mod commands;
mod config;

pub use build::{
    build_tokenizer, load_selected, question_phrase, region_tokens, save_selected,
    ExampleBuilder, SelectedRow,
};
pub use commands::{
    cmd_analyze, cmd_eval, cmd_knowledge, cmd_select, cmd_synth, cmd_train, EvalOptions,
    KnowledgeSummary, SelectSummary,
};
pub use config::{
    meta_path, read_meta, write_meta, ArtifactMeta, EmbedderSettings, KnowledgeSettings,
    KnowledgeSourceKind, PathsConfig, RunConfig, SynthSettings, TrainSettings, TOOL_VERSION,
};

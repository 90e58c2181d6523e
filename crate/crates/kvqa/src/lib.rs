//! Knowledge-augmented visual question answering at desk scale.
//!
//! The pipeline turns a question plus detected object tags into a short
//! declarative phrase, expands that phrase into commonsense inferences
//! drawn from a knowledge source, ranks the inferences against the
//! question, fuses the best ones into a single vector with multi-head
//! attention (weakly supervised towards answer-bearing inferences), and
//! feeds the result to a small transformer that predicts an answer from
//! a fixed vocabulary.
//!
//! Modules follow the pipeline stages: [`corpus`] (datasets, metric,
//! synthetic data), [`knowledge`] (inference generation), [`selection`]
//! (embedding and ranking), [`fusion`] (attention fusion), [`encoder`]
//! (the answering model) and [`cli`] (command orchestration).

pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod knowledge;
pub mod linalg;
pub mod selection;
pub mod text;

pub use error::Error;

/// Crate result alias used across all modules.
pub type Result<T> = std::result::Result<T, Error>;

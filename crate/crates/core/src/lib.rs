//! Benchmark harness for Likert-scale rating prediction with large language
//! models.
//!
//! The crate covers the whole pipeline: building evaluation datasets from
//! review corpora ([`corpus`]), assembling user profiles ([`profile`]),
//! rendering chat prompts ([`promptgen`]), talking to chat-completion and
//! embedding endpoints ([`gateway`]), parsing scores out of raw generations
//! ([`extract`]), classical baselines ([`baselines`]), evaluation statistics
//! ([`metrics`]), similarity splits ([`similarity`]) and experiment
//! orchestration ([`runner`]).

pub mod baselines;
pub mod corpus;
pub mod extract;
mod fingerprint;
pub mod gateway;
pub mod metrics;
pub mod profile;
pub mod promptgen;
pub mod runner;
pub mod similarity;
pub mod store;

pub use baselines::{MfHyper, MfModel, RatingTriple, RealTriple};
pub use corpus::{DatasetStats, EvalInstance, RatingScale, ReviewRecord};
pub use extract::{FailureReason, ParseResult};
pub use gateway::{Gateway, ModelConfig, Pipeline, RawOutput, RunPlan};
pub use metrics::{MetricsReport, PredictionRecord};
pub use profile::{ProfileFormat, ProfileKind, UserProfile};
pub use promptgen::{DomainVocabulary, OutputFormat, RenderedPrompt, Strategy};
pub use runner::{ExperimentConfig, ReportLayout};
pub use similarity::SimilarityScore;

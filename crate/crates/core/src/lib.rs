//! Contrastive-example decoding (CED).
//!
//! Two prompts are built for every question: a plain one holding the
//! visual description and question, and one with labeled in-context shots
//! prepended. A backend scores the next token under both, and decoding
//! picks the token whose log-probability rises the most once the shots are
//! present, among tokens that remain plausible under the shot-conditioned
//! distribution.
//!
//! Math is generic over [`Scalar`] (`f32` or `f64`); the aliases at the crate
//! root fix it to `f64`.
//!
//! ```
//! use ced_core::{ced_scores, LogProbDist};
//!
//! let with_shots = LogProbDist::from_probs([("a", 0.5), ("b", 0.4), ("c", 0.1)], false).unwrap();
//! let plain = LogProbDist::from_probs([("a", 0.7), ("b", 0.2), ("c", 0.1)], false).unwrap();
//! let scored = ced_scores(&with_shots, &plain, 0.1).unwrap();
//! assert_eq!(scored.selected, "b");
//! ```

pub mod backend;
pub mod decoder;
pub mod distributions;
pub mod eval;
pub mod fusion;
pub mod scalar;
pub mod synthetic;

pub use backend::{
    build_toy_table, context_hash, fit_bigram, Backend, BackendDescriptor, BackendError,
    RemoteOptions, TableFile,
};
pub use decoder::{decode_ced, decode_greedy, DecodeError, Method, StopReason};
pub use distributions::{
    adaptive_head, align_supports, ced_scores, ced_scores_with_floor, contrast, normalize,
    DistError, DEFAULT_ALPHA, DEFAULT_FLOOR,
};
pub use eval::{
    exact_match, load_dataset, normalize_answer, run_experiment, validate_file, vqa_soft_accuracy,
    DatasetError, EvalError, EvalRecord, ExperimentReport, Metric, Split,
};
pub use fusion::{
    build_prompt_pair, question_type, render_example, render_features, select_examples,
    ContextExample, DescriptiveFeatures, FusionError, PromptPair, PromptTemplate,
    SelectionStrategy, DEFAULT_TOP_N,
};
pub use scalar::Scalar;

pub type LogProbDist = distributions::LogProbDist<f64>;
pub type LogProbDistF32 = distributions::LogProbDist<f32>;
pub type CedScore = distributions::CedScore<f64>;
pub type ScoredCandidates = distributions::ScoredCandidates<f64>;
pub type DecodeParams = decoder::DecodeParams<f64>;
pub type DecodeParamsF32 = decoder::DecodeParams<f32>;
pub type DecodeTrace = decoder::DecodeTrace<f64>;
pub type TraceStep = decoder::TraceStep<f64>;
pub type ExperimentGrid = eval::ExperimentGrid<f64>;
pub type TableBackend = backend::TableBackend<f64>;
pub type BigramBackend = backend::BigramBackend<f64>;
pub type RemoteBackend = backend::RemoteBackend<f64>;
pub type ReplayBackend = backend::ReplayBackend<f64>;

//! Text de-identification toolkit: masking, token-level differential privacy
//! and leakage/utility evaluation over clinical-style corpora.

pub mod corpus;
pub mod embeddings;
pub mod evaluation;
pub mod maskers;
pub mod mechanisms;
pub mod par;
pub mod pipeline;
pub mod stats;
pub mod synth;

pub use corpus::{Category, Corpus, Document, PiiSpan, Span, Token, TokenKind};
pub use embeddings::EmbeddingStore;
pub use evaluation::{Granularity, LeakageReport, SurvivalReport, SweepResult, SweepRow};
pub use mechanisms::{MechanismConfig, MechanismKind, TokenMechanism};
pub use par::ExecMode;
pub use pipeline::{run_pipeline, Pipeline, PipelineSpec};

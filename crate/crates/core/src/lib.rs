//! Iterative multimodal retrieval-augmented question answering.
//!
//! Each sample alternates joint search over a textual passage KB and an
//! image-text KB with LLM-written reasoning records, then answers from the
//! accumulated records.

pub mod embed;
pub mod eval;
pub mod http;
pub mod ingest;
pub mod kbstore;
pub mod llm;
pub mod media;
pub mod pipeline;
pub mod search;
pub mod synth;

#[cfg(test)]
mod testutil;

pub use embed::{
    DeterministicEmbedder, EmbedError, Embedder, EmbeddingVector, ProviderConfig, ProviderKind,
};
pub use eval::{
    build_report, AnswerJudge, CoverEmJudge, EvalError, KbLookup, MetricReport, ReportConfig,
};
pub use ingest::{
    downsample, load_benchmark, tune_threshold, BenchmarkSpec, IngestError, QuestionMatrix,
};
pub use kbstore::{KbError, KbIndex, KbKind, KbRecord, MultimodalEntry, TextPassage};
pub use llm::{CallTag, ChatModel, LlmConfig, LlmError, LlmMode, PromptKind, ScriptedChat};
pub use media::{FsImageLoader, ImageLoader};
pub use pipeline::{
    AnswerMode, Engine, IterationTrace, PipelineConfig, PipelineError, RunResult, RunStatus, Sample,
};
pub use search::{Encoders, JointHits, KnowledgeBases, QuerySlot, RetrievalBudget, ScoredHit};

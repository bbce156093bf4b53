//! Infilling benchmark: span and sentence-drop tasks, the causal-masking
//! rearrangement, ROUGE scoring, and the FiLM-vs-CM harness.

mod bench;
mod cm;
mod rouge;
mod spans;

pub use bench::{
    build_tasks, cm_generate, run_benchmark, Aggregate, BenchConfig, BenchReport, ExampleRow, ReportHeader, RougeMode,
    SystemOutput, TaskSet, MAX_SPAN_TOKENS,
};
pub use cm::{cm_reintegrate, cm_transform, CmLayout, Sentinels, MAX_SPANS};
pub use rouge::{rouge, Prf, RougeScore};
pub use spans::{drop_sentence, sample_spans, split_sentences, InfillTask, SpanSpec, TaskKind};

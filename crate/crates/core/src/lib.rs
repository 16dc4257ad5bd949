//! Orchestration of decomposed model pipelines under three execution
//! strategies: a single monolithic prompt, a fixed static sequence, and a
//! runtime-structured strategy with validation-gated state, selective
//! retry, and skip arcs. Includes a deterministic scripted backend, fault
//! injection, and benchmark aggregation.

pub mod assets;
pub mod backend;
pub mod bench;
pub mod engine;
pub mod http;
pub mod inject;
pub mod metrics;
pub mod path;
pub mod pipeline;
pub mod report;
pub mod schema;
pub mod state;

pub use backend::{
    count_tokens, BackendError, BackendRegistry, CallKey, MockBackend, MockScript, ModelBackend,
    ModelRequest, ModelResponse,
};
pub use engine::{
    compile_monolithic, compute_retry_set, evaluate_branch_signals, run, run_indexed,
    BranchDecision, EngineError, RunConfig,
};
pub use inject::{InjectionMode, InjectionSpec};
pub use metrics::{
    aggregate, failure_rate, measure_framework_overhead, retry_tokens, AggregateTable, CallRecord,
    RunOutcome, RunReport, Stat,
};
pub use pipeline::{
    parse_pipeline, serialize_pipeline, topological_order, validate_pipeline, PipelineError,
    PipelineSpec, Strategy,
};
pub use schema::{parse_value, validate, SchemaNode, ValidationReport};
pub use state::{StateStore, SubtaskStatus};

//! Runtime branching scenarios beyond the calibrated benchmarks: skip
//! arcs, low-content continuation, and hard-failure paths.

use std::sync::Arc;

use rstd_core::assets::bundled_pipeline;
use rstd_core::backend::{
    BackendError, BackendRegistry, CallKey, MockBackend, MockEntry, MockScript, ModelBackend,
    ModelRequest, ModelResponse,
};
use rstd_core::engine::{run, EngineError, RunConfig};
use rstd_core::metrics::RunOutcome;
use rstd_core::pipeline::{parse_pipeline, PipelineSpec, Strategy};
use rstd_core::state::SubtaskStatus;

fn uc2() -> PipelineSpec {
    parse_pipeline(bundled_pipeline("uc2").unwrap()).unwrap()
}

fn entry(subtask: &str, attempt: u32, text: &str) -> MockEntry {
    MockEntry {
        subtask: subtask.to_string(),
        attempt,
        response_text: text.to_string(),
        completion_tokens: None,
        simulated_latency: 0.0,
        jitter_seed: None,
    }
}

fn registry(entries: Vec<MockEntry>) -> BackendRegistry {
    let script = MockScript {
        entries,
        run_overrides: vec![],
    };
    BackendRegistry::with_default(Arc::new(MockBackend::without_sleep(script)))
}

const S3_OK: &str = r#"{"cause":"unbounded in-memory batch processing","confidence":0.9,"evidence":["heap growth"]}"#;
const S4_OK: &str = r#"{"steps":["add backpressure"],"risk":"low"}"#;
const S5_OK: &str = r#"{"title":"report","summary":"unbounded in-memory batch processing","actions":["fix"]}"#;

#[test]
fn empty_triage_skips_classification() {
    let registry = registry(vec![
        entry("S1", 1, "[]"),
        entry("S3", 1, S3_OK),
        entry("S4", 1, S4_OK),
        entry("S5", 1, S5_OK),
    ]);
    let report = run(&uc2(), &RunConfig::new(Strategy::Rstd), &registry).unwrap();
    assert_eq!(report.outcome, RunOutcome::Success);
    assert_eq!(report.llm_calls(), 4);
    assert!(report.calls.iter().all(|c| c.subtask != "S2"));
    let s2 = report
        .final_state
        .iter()
        .find(|e| e.subtask_id == "S2")
        .unwrap();
    assert_eq!(s2.status, SubtaskStatus::Skipped);
    assert!(s2.value.is_none());
}

#[test]
fn low_confidence_without_skip_target_proceeds_flagged() {
    let low = r#"{"cause":"unclear","confidence":0.2,"evidence":["weak signal"]}"#;
    let registry = registry(vec![
        entry("S1", 1, r#"[{"anomaly":"oom","severity":"high"}]"#),
        entry("S2", 1, r#"[{"anomaly":"oom","type":"memory","confidence":0.9}]"#),
        entry("S3", 1, low),
        entry("S4", 1, S4_OK),
        entry("S5", 1, S5_OK),
    ]);
    let report = run(&uc2(), &RunConfig::new(Strategy::Rstd), &registry).unwrap();
    assert_eq!(report.outcome, RunOutcome::Success);
    assert_eq!(report.llm_calls(), 5);
    assert_eq!(report.low_content, vec!["S3".to_string()]);
}

#[test]
fn unrecoverable_failure_is_hard_for_both_strategies() {
    let bad = r#"{"cause":"missing fields"}"#;
    let entries = vec![
        entry("S1", 1, r#"[{"anomaly":"oom","severity":"high"}]"#),
        entry("S2", 1, r#"[{"anomaly":"oom","type":"memory","confidence":0.9}]"#),
        entry("S3", 1, bad),
        entry("S3", 2, bad),
        entry("S4", 1, S4_OK),
        entry("S4", 2, S4_OK),
        entry("S5", 1, S5_OK),
        entry("S5", 2, S5_OK),
    ];
    for strategy in [Strategy::Rstd, Strategy::Static] {
        let report = run(&uc2(), &RunConfig::new(strategy), &registry(entries.clone())).unwrap();
        assert_eq!(report.outcome, RunOutcome::HardFailure, "{}", strategy.name());
        assert!(!report.correct);
    }
}

struct FailingBackend;

impl ModelBackend for FailingBackend {
    fn complete(
        &self,
        _request: &ModelRequest,
        _call_key: &CallKey,
    ) -> Result<ModelResponse, BackendError> {
        Err(BackendError::Transport("connection reset".to_string()))
    }
}

#[test]
fn transport_errors_propagate_unconsumed() {
    let registry = BackendRegistry::with_default(Arc::new(FailingBackend));
    let err = run(&uc2(), &RunConfig::new(Strategy::Rstd), &registry).unwrap_err();
    assert!(matches!(
        err,
        EngineError::Backend(BackendError::Transport(_))
    ));
}

#[test]
fn static_passes_malformed_values_downstream() {
    // The classification output is schema-invalid; the fixed sequence
    // stores it anyway and the downstream prompt sees the malformed value.
    let malformed = r#"[{"anomaly":"oom","type":"memory"}]"#;
    let entries = vec![
        entry("S1", 1, r#"[{"anomaly":"oom","severity":"high"}]"#),
        entry("S1", 2, r#"[{"anomaly":"oom","severity":"high"}]"#),
        entry("S2", 1, malformed),
        entry("S2", 2, r#"[{"anomaly":"oom","type":"memory","confidence":0.9}]"#),
        entry("S3", 1, S3_OK),
        entry("S3", 2, S3_OK),
        entry("S4", 1, S4_OK),
        entry("S4", 2, S4_OK),
        entry("S5", 1, S5_OK),
        entry("S5", 2, S5_OK),
    ];
    let report = run(&uc2(), &RunConfig::new(Strategy::Static), &registry(entries)).unwrap();
    assert_eq!(report.outcome, RunOutcome::Success);
    // First pass of 5 plus the cascading rerun of S2's downstream set.
    assert_eq!(report.llm_calls(), 9);
    let s2_first = report
        .calls
        .iter()
        .find(|c| c.subtask == "S2" && c.attempt == 1)
        .unwrap();
    assert!(!s2_first.validation_passed);
    let s3_first = report
        .calls
        .iter()
        .find(|c| c.subtask == "S3" && c.attempt == 1)
        .unwrap();
    assert!(s3_first.validation_passed, "S3 still ran with the malformed input");
}

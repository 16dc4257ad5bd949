//! Strategy execution: monolithic single-prompt runs, static fixed-order
//! runs with cascading rerun, and runtime-structured runs with
//! validation-gated state, branch signals, and selective retry.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use serde_json::Value;
use thiserror::Error;

use crate::backend::{BackendRegistry, CallKey, ModelRequest, ModelResponse, MONOLITHIC_CALL_ID};
use crate::inject::{self, InjectionMode, InjectionSpec};
use crate::metrics::{CallRecord, RunOutcome, RunReport, StateSnapshotEntry};
use crate::pipeline::{
    render_template, resolve_failure_policy, skip_target, topological_order, PipelineError,
    PipelineSpec, Strategy, SubtaskSpec, ROOT_SOURCE,
};
use crate::path::ValuePath;
use crate::schema::{
    build_repair_prompt, check_content_signal, parse_value, validate, SchemaError,
    ValidationReport,
};
use crate::state::{EntryMeta, StateEntry, StateError, StateStore, SubtaskStatus};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Backend(#[from] crate::backend::BackendError),
    #[error(transparent)]
    Injection(#[from] crate::inject::InjectError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

/// Runtime branching decision after a subtask settles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BranchDecision {
    Proceed { low_content: bool },
    Skip { target: String },
    /// Repair-prompt retry of the same subtask; taken inside the
    /// validation-and-repair loop while attempts remain.
    Retry,
    Fail,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub repetitions: u32,
    pub seed: u64,
    pub injection: Option<InjectionSpec>,
}

impl RunConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            repetitions: 1,
            seed: 0,
            injection: None,
        }
    }
}

/// Single-prompt rendering of the whole task: the explicit monolithic
/// prompt when configured, otherwise each subtask's name and template in
/// topological order with root inputs inlined.
pub fn compile_monolithic(pipeline: &PipelineSpec) -> String {
    if let Some(prompt) = &pipeline.monolithic_prompt {
        return prompt.clone();
    }
    let order = topological_order(pipeline)
        .unwrap_or_else(|_| pipeline.subtask_ids().iter().map(|s| s.to_string()).collect());
    let mut out = String::new();
    for id in &order {
        let sub = pipeline.subtask(id).expect("ordered ids exist");
        let root_ctx: BTreeMap<String, String> = sub
            .input_keys
            .iter()
            .filter(|k| k.source == ROOT_SOURCE)
            .filter_map(|k| {
                pipeline
                    .root_inputs
                    .get(&k.key)
                    .map(|v| (k.key.clone(), v.clone()))
            })
            .collect();
        out.push_str(&format!(
            "## {}\n{}\n\n",
            sub.name,
            render_template(&sub.prompt_template, &root_ctx)
        ));
    }
    out
}

/// The ordered list of subtasks re-executed after a failure at
/// `failed_at` under the given strategy.
pub fn compute_retry_set(
    pipeline: &PipelineSpec,
    strategy: Strategy,
    failed_at: &str,
) -> Result<Vec<String>, PipelineError> {
    pipeline.subtask(failed_at)?;
    let order = topological_order(pipeline)?;
    let members: Vec<String> = match strategy {
        Strategy::Monolithic => return Ok(order),
        Strategy::Static => resolve_failure_policy(pipeline, failed_at)?.static_retry_set,
        Strategy::Rstd => resolve_failure_policy(pipeline, failed_at)?.rstd_retry_set,
    };
    Ok(order.into_iter().filter(|id| members.contains(id)).collect())
}

/// Branch on the three runtime signals: completion status, schema
/// validation outcome (already folded into status by the gate), and
/// output content.
pub fn evaluate_branch_signals(
    entry: &StateEntry,
    subtask: &SubtaskSpec,
    pipeline: &PipelineSpec,
) -> Result<BranchDecision, EngineError> {
    match entry.status {
        SubtaskStatus::Failed => Ok(BranchDecision::Fail),
        SubtaskStatus::Completed => {
            let value = entry.value.as_ref().expect("completed entry has value");
            let confidence_path = match &subtask.confidence_path {
                Some(p) => Some(ValuePath::parse(p).map_err(|e| {
                    PipelineError::Spec {
                        path: format!("subtasks.{}.confidence_path", subtask.id),
                        message: e.to_string(),
                    }
                })?),
                None => None,
            };
            let signal = check_content_signal(
                value,
                confidence_path.as_ref(),
                subtask.confidence_threshold,
            );
            if signal {
                Ok(BranchDecision::Proceed { low_content: false })
            } else if let Some(target) = skip_target(pipeline, &subtask.id)? {
                Ok(BranchDecision::Skip { target })
            } else {
                Ok(BranchDecision::Proceed { low_content: true })
            }
        }
        other => panic!("branch signals evaluated on {other:?} entry"),
    }
}

struct RunCtx<'a> {
    pipeline: &'a PipelineSpec,
    registry: &'a BackendRegistry,
    injection: Option<&'a InjectionSpec>,
    run_index: u32,
    store: StateStore,
    records: Vec<CallRecord>,
    attempts: HashMap<String, u32>,
    low_content: Vec<String>,
    last_boundary: Instant,
}

struct CallOutcome {
    response: ModelResponse,
    raw: String,
    parsed: Option<Value>,
    report: ValidationReport,
}

impl<'a> RunCtx<'a> {
    fn next_attempt(&mut self, id: &str) -> u32 {
        let counter = self.attempts.entry(id.to_string()).or_insert(0);
        *counter += 1;
        *counter
    }

    fn total_attempts(&self, id: &str) -> u32 {
        self.attempts.get(id).copied().unwrap_or(0)
    }

    fn injection_for(&self, subtask: &str, attempt: u32) -> Option<&'a InjectionSpec> {
        self.injection
            .filter(|spec| inject::should_inject(spec, subtask, attempt))
    }

    /// Dispatch one model call, apply any response corruption, parse and
    /// validate, and record the telemetry.
    fn call(
        &mut self,
        subtask: &str,
        attempt: u32,
        model_ref: &str,
        prompt: String,
        schema: Option<&crate::schema::SchemaNode>,
        retry_flag: bool,
        mut injection_applied: bool,
    ) -> Result<CallOutcome, EngineError> {
        let backend = self.registry.resolve(model_ref)?;
        let request = ModelRequest {
            model_ref: model_ref.to_string(),
            prompt,
            temperature: 0.0,
            max_output_tokens: None,
        };
        let key = CallKey {
            subtask: subtask.to_string(),
            attempt,
            run_index: self.run_index,
        };
        let dispatch = Instant::now();
        let gap = dispatch.duration_since(self.last_boundary).as_secs_f64();
        let response = backend.complete(&request, &key)?;
        let call_end = Instant::now();

        let mut raw = response.text.clone();
        if let Some(spec) = self.injection_for(subtask, attempt) {
            if let InjectionMode::CorruptResponse { path } = &spec.mode {
                raw = inject::apply_to_raw(path, &raw)?;
                injection_applied = true;
            }
        }
        let parsed = parse_value(&raw).ok();
        let report = match (&parsed, schema) {
            (None, _) => ValidationReport::unparsable(),
            (Some(value), Some(schema)) => validate(value, schema),
            (Some(_), None) => ValidationReport::passing(),
        };
        let validate_end = Instant::now();
        self.records.push(CallRecord {
            run_index: self.run_index,
            subtask: subtask.to_string(),
            attempt,
            prompt_tokens: response.prompt_tokens,
            completion_tokens: response.completion_tokens,
            model_latency: response.model_latency,
            framework_latency: gap + validate_end.duration_since(call_end).as_secs_f64(),
            validation_passed: report.passed,
            retry_flag,
            injection_applied,
        });
        self.last_boundary = validate_end;
        Ok(CallOutcome {
            response,
            raw,
            parsed,
            report,
        })
    }

    /// Context for one attempt, with input corruption applied when the
    /// injection targets this (subtask, attempt).
    fn attempt_context(
        &mut self,
        sub: &SubtaskSpec,
        attempt: u32,
    ) -> Result<(BTreeMap<String, String>, bool), EngineError> {
        let mut context = self.store.assemble_context(sub)?;
        if let Some(spec) = self.injection_for(&sub.id, attempt) {
            if let InjectionMode::DropField { path } = &spec.mode {
                corrupt_context(&mut context, path)?;
                return Ok((context, true));
            }
        }
        Ok((context, false))
    }

    /// Validation-gated execution with the repair loop: render, call,
    /// parse, validate; on failure retry with the validation errors
    /// appended, up to the repair budget. Only schema-passing outputs
    /// reach the store.
    fn execute_gated(&mut self, id: &str, retry_flag: bool) -> Result<bool, EngineError> {
        let sub = self.pipeline.subtask(id)?;
        let budget = resolve_failure_policy(self.pipeline, id)?.max_repair_attempts;
        let clean_context = self.store.assemble_context(sub)?;
        let clean_prompt = render_template(&sub.prompt_template, &clean_context);
        let mut prompt = clean_prompt.clone();
        for round in 1..=budget {
            let attempt = self.next_attempt(id);
            let mut injected = false;
            if self.injection_for(id, attempt).is_some() {
                let (context, corrupted) = self.attempt_context(sub, attempt)?;
                if corrupted {
                    prompt = render_template(&sub.prompt_template, &context);
                    injected = true;
                }
            }
            let outcome = self.call(
                id,
                attempt,
                &sub.model_ref,
                prompt.clone(),
                Some(&sub.output_schema),
                retry_flag || round > 1,
                injected,
            )?;
            if outcome.report.passed {
                self.store.write_validated(
                    id,
                    outcome.parsed.expect("passing report implies parse"),
                    EntryMeta {
                        attempts: self.total_attempts(id),
                        prompt_tokens: outcome.response.prompt_tokens,
                        completion_tokens: outcome.response.completion_tokens,
                    },
                )?;
                return Ok(true);
            }
            if round < budget {
                // Repair against the uncorrupted prompt; injection is
                // single-shot by construction.
                prompt = build_repair_prompt(&clean_prompt, &outcome.raw, &outcome.report)?;
            }
        }
        self.store.note_attempts(id, self.total_attempts(id))?;
        self.store.mark(id, SubtaskStatus::Failed)?;
        Ok(false)
    }

    /// Fixed-sequence execution: one attempt, validation recorded for
    /// detection, but the output is stored and passed forward regardless —
    /// the static baseline has no runtime branching.
    fn execute_ungated(&mut self, id: &str, retry_flag: bool) -> Result<bool, EngineError> {
        let sub = self.pipeline.subtask(id)?;
        let attempt = self.next_attempt(id);
        let (context, injected) = self.attempt_context(sub, attempt)?;
        let prompt = render_template(&sub.prompt_template, &context);
        let outcome = self.call(
            id,
            attempt,
            &sub.model_ref,
            prompt,
            Some(&sub.output_schema),
            retry_flag,
            injected,
        )?;
        let value = outcome
            .parsed
            .unwrap_or_else(|| Value::String(outcome.raw.clone()));
        self.store.write_ungated(
            id,
            value,
            EntryMeta {
                attempts: self.total_attempts(id),
                prompt_tokens: outcome.response.prompt_tokens,
                completion_tokens: outcome.response.completion_tokens,
            },
        )?;
        Ok(outcome.report.passed)
    }

    fn apply_content_branch(&mut self, id: &str) -> Result<(), EngineError> {
        let sub = self.pipeline.subtask(id)?;
        let entry = self.store.entry(id).expect("entry exists after execution");
        match evaluate_branch_signals(entry, sub, self.pipeline)? {
            BranchDecision::Proceed { low_content: true } => {
                self.low_content.push(id.to_string());
            }
            BranchDecision::Skip { target } => {
                self.store.mark(&target, SubtaskStatus::Skipped)?;
            }
            _ => {}
        }
        Ok(())
    }

    fn run_rstd(&mut self) -> Result<RunOutcome, EngineError> {
        let order = topological_order(self.pipeline)?;
        for id in &order {
            if self.store.status(id) != SubtaskStatus::Pending {
                continue;
            }
            if self.execute_gated(id, false)? {
                self.apply_content_branch(id)?;
                continue;
            }
            // Fail decision: execute the selective retry set, then resume.
            let retry_set = compute_retry_set(self.pipeline, Strategy::Rstd, id)?;
            for member in &retry_set {
                self.store.reset_for_retry(member)?;
                if !self.execute_gated(member, true)? {
                    return Ok(RunOutcome::HardFailure);
                }
            }
            if !retry_set.iter().any(|m| m == id) {
                // The blamed subtask was upstream; re-run the detection
                // point itself against the repaired state.
                self.store.reset_for_retry(id)?;
                if !self.execute_gated(id, false)? {
                    return Ok(RunOutcome::HardFailure);
                }
            }
            self.apply_content_branch(id)?;
        }
        Ok(RunOutcome::Success)
    }

    fn run_static(&mut self) -> Result<RunOutcome, EngineError> {
        let order = topological_order(self.pipeline)?;
        let mut first_failure: Option<String> = None;
        for id in &order {
            let passed = self.execute_ungated(id, false)?;
            if !passed && first_failure.is_none() {
                first_failure = Some(id.clone());
            }
        }
        let Some(failed_at) = first_failure else {
            return Ok(RunOutcome::Success);
        };
        let retry_set = compute_retry_set(self.pipeline, Strategy::Static, &failed_at)?;
        let mut recovered = true;
        for member in &retry_set {
            self.store.reset_for_retry(member)?;
            recovered &= self.execute_ungated(member, true)?;
        }
        if recovered {
            Ok(RunOutcome::Success)
        } else {
            Ok(RunOutcome::HardFailure)
        }
    }

    fn run_monolithic(&mut self) -> Result<(RunOutcome, Option<Value>), EngineError> {
        let prompt = compile_monolithic(self.pipeline);
        // One full re-call at most: the single-prompt baseline recovers
        // only by rerunning everything.
        for attempt in 1..=2u32 {
            let injected = self
                .injection
                .map(|spec| spec.attempt == attempt)
                .unwrap_or(false);
            let spec_for_attempt = if injected { self.injection } else { None };
            let outcome = self.call_monolithic(
                attempt,
                prompt.clone(),
                spec_for_attempt,
            )?;
            if outcome.report.passed {
                return Ok((RunOutcome::Success, outcome.parsed));
            }
        }
        Ok((RunOutcome::HardFailure, None))
    }

    fn call_monolithic(
        &mut self,
        attempt: u32,
        prompt: String,
        injection: Option<&InjectionSpec>,
    ) -> Result<CallOutcome, EngineError> {
        let backend = self.registry.resolve(crate::backend::DEFAULT_MODEL_REF)?;
        let request = ModelRequest {
            model_ref: crate::backend::DEFAULT_MODEL_REF.to_string(),
            prompt,
            temperature: 0.0,
            max_output_tokens: None,
        };
        let key = CallKey {
            subtask: MONOLITHIC_CALL_ID.to_string(),
            attempt,
            run_index: self.run_index,
        };
        let dispatch = Instant::now();
        let gap = dispatch.duration_since(self.last_boundary).as_secs_f64();
        let response = backend.complete(&request, &key)?;
        let call_end = Instant::now();
        let mut raw = response.text.clone();
        let mut injection_applied = false;
        if let Some(spec) = injection {
            raw = inject::apply_to_raw(spec.mode.path(), &raw)?;
            injection_applied = true;
        }
        let parsed = parse_value(&raw).ok();
        let report = match (&parsed, &self.pipeline.monolithic_schema) {
            (None, _) => ValidationReport::unparsable(),
            (Some(value), Some(schema)) => validate(value, schema),
            (Some(_), None) => ValidationReport::passing(),
        };
        let validate_end = Instant::now();
        self.records.push(CallRecord {
            run_index: self.run_index,
            subtask: MONOLITHIC_CALL_ID.to_string(),
            attempt,
            prompt_tokens: response.prompt_tokens,
            completion_tokens: response.completion_tokens,
            model_latency: response.model_latency,
            framework_latency: gap + validate_end.duration_since(call_end).as_secs_f64(),
            validation_passed: report.passed,
            retry_flag: attempt > 1,
            injection_applied,
        });
        self.last_boundary = validate_end;
        Ok(CallOutcome {
            response,
            raw,
            parsed,
            report,
        })
    }
}

fn corrupt_context(
    context: &mut BTreeMap<String, String>,
    path_text: &str,
) -> Result<(), EngineError> {
    let path = ValuePath::parse(path_text)
        .map_err(|_| inject::InjectError::PathNotFound(path_text.to_string()))?;
    let key = path
        .leading_key()
        .ok_or_else(|| inject::InjectError::PathNotFound(path_text.to_string()))?;
    let serialized = context
        .get(key)
        .ok_or_else(|| inject::InjectError::PathNotFound(path_text.to_string()))?;
    let tail = path.tail();
    if tail.is_root() {
        context.remove(key);
        return Ok(());
    }
    let mut value: Value = serde_json::from_str(serialized)
        .map_err(|_| inject::InjectError::NotJson(path_text.to_string()))?;
    tail.remove(&mut value)
        .map_err(|_| inject::InjectError::PathNotFound(path_text.to_string()))?;
    context.insert(
        key.to_string(),
        serde_json::to_string(&value).expect("mutated value serializes"),
    );
    Ok(())
}

/// Execute one repetition of a pipeline under the configured strategy.
pub fn run_indexed(
    pipeline: &PipelineSpec,
    config: &RunConfig,
    registry: &BackendRegistry,
    run_index: u32,
) -> Result<RunReport, EngineError> {
    let run_start = Instant::now();
    let mut ctx = RunCtx {
        pipeline,
        registry,
        injection: config.injection.as_ref(),
        run_index,
        store: StateStore::for_pipeline(pipeline),
        records: Vec::new(),
        attempts: HashMap::new(),
        low_content: Vec::new(),
        last_boundary: run_start,
    };

    let (outcome, monolithic_value) = match config.strategy {
        Strategy::Monolithic => ctx.run_monolithic()?,
        Strategy::Static => (ctx.run_static()?, None),
        Strategy::Rstd => (ctx.run_rstd()?, None),
    };

    let wall_seconds = run_start.elapsed().as_secs_f64();
    let model_seconds: f64 = ctx.records.iter().map(|c| c.model_latency).sum();
    let total_tokens: u64 = ctx.records.iter().map(CallRecord::total_tokens).sum();
    let retry_tokens: u64 = ctx
        .records
        .iter()
        .filter(|c| c.retry_flag)
        .map(CallRecord::total_tokens)
        .sum();

    let final_output = final_output_value(pipeline, &ctx.store, monolithic_value.as_ref());
    let correct = match (&pipeline.checker, outcome) {
        (_, RunOutcome::HardFailure) => false,
        (Some(checker), RunOutcome::Success) => final_output
            .map(|v| serde_json::to_string(v).unwrap_or_default().contains(&checker.contains))
            .unwrap_or(false),
        (None, RunOutcome::Success) => true,
    };

    let mut final_state: Vec<StateSnapshotEntry> = Vec::new();
    if let Some(value) = &monolithic_value {
        let record = ctx
            .records
            .iter()
            .rfind(|c| c.validation_passed)
            .expect("monolithic success has a passing call");
        final_state.push(StateSnapshotEntry {
            subtask_id: MONOLITHIC_CALL_ID.to_string(),
            status: SubtaskStatus::Completed,
            attempts: ctx.records.len() as u32,
            prompt_tokens: record.prompt_tokens,
            completion_tokens: record.completion_tokens,
            value: Some(value.clone()),
        });
    }
    for (id, entry) in ctx.store.entries() {
        final_state.push(StateSnapshotEntry {
            subtask_id: id.clone(),
            status: entry.status,
            attempts: entry.attempts,
            prompt_tokens: entry.prompt_tokens,
            completion_tokens: entry.completion_tokens,
            value: entry.value.clone(),
        });
    }

    Ok(RunReport {
        pipeline_id: pipeline.id.clone(),
        strategy: config.strategy,
        run_index,
        calls: ctx.records,
        total_tokens,
        retry_tokens,
        wall_seconds,
        model_seconds,
        framework_seconds: wall_seconds - model_seconds,
        outcome,
        correct,
        low_content: ctx.low_content,
        final_state,
    })
}

/// Execute a pipeline once (repetition index 0).
pub fn run(
    pipeline: &PipelineSpec,
    config: &RunConfig,
    registry: &BackendRegistry,
) -> Result<RunReport, EngineError> {
    run_indexed(pipeline, config, registry, 0)
}

fn final_output_value<'a>(
    pipeline: &PipelineSpec,
    store: &'a StateStore,
    monolithic_value: Option<&'a Value>,
) -> Option<&'a Value> {
    if let Some(value) = monolithic_value {
        return Some(value);
    }
    let order = topological_order(pipeline).ok()?;
    order
        .iter()
        .rev()
        .find_map(|id| store.entry(id).and_then(|e| e.value.as_ref()))
}

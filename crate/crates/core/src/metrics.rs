//! Per-call telemetry, per-run reports, and aggregation across
//! repetitions: retry cost, failure rates, and the model/framework latency
//! split.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::pipeline::Strategy;
use crate::state::SubtaskStatus;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("cannot aggregate reports from mixed pipelines or strategies")]
    MixedConfig,
    #[error("no reports to aggregate")]
    Empty,
}

/// Telemetry for one model call. Every attempt at every subtask emits
/// exactly one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub run_index: u32,
    /// Subtask id, or `monolithic` for the single-prompt strategy.
    pub subtask: String,
    pub attempt: u32,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub model_latency: f64,
    /// Orchestration time around this call: gap since the previous call
    /// completed plus parse/validate time for this one.
    pub framework_latency: f64,
    pub validation_passed: bool,
    pub retry_flag: bool,
    pub injection_applied: bool,
}

impl CallRecord {
    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    Success,
    HardFailure,
}

/// Final-state snapshot line for one subtask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshotEntry {
    pub subtask_id: String,
    pub status: SubtaskStatus,
    pub attempts: u32,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub pipeline_id: String,
    pub strategy: Strategy,
    pub run_index: u32,
    pub calls: Vec<CallRecord>,
    pub total_tokens: u64,
    pub retry_tokens: u64,
    pub wall_seconds: f64,
    pub model_seconds: f64,
    pub framework_seconds: f64,
    pub outcome: RunOutcome,
    pub correct: bool,
    /// Subtasks that completed with a low content signal but had no skip
    /// target to route around.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub low_content: Vec<String>,
    pub final_state: Vec<StateSnapshotEntry>,
}

impl RunReport {
    /// Cost of a failure-free pass: everything that is not
    /// retry-attributed.
    pub fn baseline_tokens(&self) -> u64 {
        self.total_tokens - self.retry_tokens
    }

    pub fn llm_calls(&self) -> usize {
        self.calls.len()
    }
}

/// Retry cost of a run: token total over retry-attributed calls.
pub fn retry_tokens(report: &RunReport) -> u64 {
    report
        .calls
        .iter()
        .filter(|c| c.retry_flag)
        .map(CallRecord::total_tokens)
        .sum()
}

/// Wall-clock run duration minus time spent inside model calls.
pub fn measure_framework_overhead(report: &RunReport) -> f64 {
    report.wall_seconds - report.model_seconds
}

/// Mean and sample standard deviation of one metric across repetitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
}

impl Stat {
    /// Welford's online algorithm; the tests check it against an
    /// independent two-pass computation.
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for (i, &x) in samples.iter().enumerate() {
            let n = (i + 1) as f64;
            let delta = x - mean;
            mean += delta / n;
            m2 += delta * (x - mean);
        }
        let sd = if samples.len() >= 2 {
            (m2 / (samples.len() as f64 - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

/// Mean ± sd per metric across the repetitions of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    pub pipeline_id: String,
    pub strategy: Strategy,
    pub repetitions: usize,
    /// Failure-free cost (total minus retry-attributed tokens).
    pub tokens: Stat,
    pub total_tokens: Stat,
    pub retry_tokens: Stat,
    pub wall_seconds: Stat,
    pub model_seconds: Stat,
    pub framework_seconds: Stat,
    pub llm_calls: Stat,
    pub correct_fraction: f64,
}

pub fn aggregate(reports: &[RunReport]) -> Result<AggregateTable, MetricsError> {
    let first = reports.first().ok_or(MetricsError::Empty)?;
    if reports
        .iter()
        .any(|r| r.pipeline_id != first.pipeline_id || r.strategy != first.strategy)
    {
        return Err(MetricsError::MixedConfig);
    }
    let collect = |f: &dyn Fn(&RunReport) -> f64| -> Stat {
        let samples: Vec<f64> = reports.iter().map(f).collect();
        Stat::from_samples(&samples)
    };
    Ok(AggregateTable {
        pipeline_id: first.pipeline_id.clone(),
        strategy: first.strategy,
        repetitions: reports.len(),
        tokens: collect(&|r| r.baseline_tokens() as f64),
        total_tokens: collect(&|r| r.total_tokens as f64),
        retry_tokens: collect(&|r| r.retry_tokens as f64),
        wall_seconds: collect(&|r| r.wall_seconds),
        model_seconds: collect(&|r| r.model_seconds),
        framework_seconds: collect(&|r| r.framework_seconds),
        llm_calls: collect(&|r| r.llm_calls() as f64),
        correct_fraction: reports.iter().filter(|r| r.correct).count() as f64
            / reports.len() as f64,
    })
}

/// Fraction of executions of a subtask that hit a natural (non-injected)
/// validation failure. An execution is one scheduling of the subtask
/// within a run, regardless of how many repair attempts it consumed.
pub fn failure_rate(reports: &[RunReport], subtask: &str) -> f64 {
    let mut executions = 0usize;
    let mut failed = 0usize;
    for report in reports {
        let attempts: Vec<&CallRecord> = report
            .calls
            .iter()
            .filter(|c| c.subtask == subtask)
            .collect();
        if attempts.is_empty() {
            continue;
        }
        executions += 1;
        if attempts
            .iter()
            .any(|c| !c.validation_passed && !c.injection_applied)
        {
            failed += 1;
        }
    }
    if executions == 0 {
        0.0
    } else {
        failed as f64 / executions as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(subtask: &str, attempt: u32, passed: bool, injected: bool) -> CallRecord {
        CallRecord {
            run_index: 0,
            subtask: subtask.to_string(),
            attempt,
            prompt_tokens: 100,
            completion_tokens: 50,
            model_latency: 0.0,
            framework_latency: 0.0,
            validation_passed: passed,
            retry_flag: attempt > 1,
            injection_applied: injected,
        }
    }

    fn report(calls: Vec<CallRecord>) -> RunReport {
        let total = calls.iter().map(CallRecord::total_tokens).sum();
        let retry = calls
            .iter()
            .filter(|c| c.retry_flag)
            .map(CallRecord::total_tokens)
            .sum();
        RunReport {
            pipeline_id: "p".to_string(),
            strategy: Strategy::Rstd,
            run_index: 0,
            calls,
            total_tokens: total,
            retry_tokens: retry,
            wall_seconds: 1.0,
            model_seconds: 0.8,
            framework_seconds: 0.2,
            outcome: RunOutcome::Success,
            correct: true,
            low_content: vec![],
            final_state: vec![],
        }
    }

    #[test]
    fn two_point_sample_sd() {
        let stat = Stat::from_samples(&[1.0, 3.0]);
        assert_eq!(stat.mean, 2.0);
        assert!((stat.sd - 2.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn identical_samples_have_zero_sd() {
        let stat = Stat::from_samples(&[2716.0; 10]);
        assert_eq!(stat.mean, 2716.0);
        assert_eq!(stat.sd, 0.0);
    }

    #[test]
    fn single_sample_sd_is_zero() {
        let stat = Stat::from_samples(&[5.0]);
        assert_eq!(stat.sd, 0.0);
    }

    #[test]
    fn mixed_config_rejected() {
        let a = report(vec![call("S1", 1, true, false)]);
        let mut b = a.clone();
        b.strategy = Strategy::Static;
        assert_eq!(aggregate(&[a, b]), Err(MetricsError::MixedConfig));
    }

    #[test]
    fn aggregation_is_permutation_invariant() {
        let mut a = report(vec![call("S1", 1, true, false)]);
        a.wall_seconds = 1.0;
        let mut b = report(vec![call("S1", 1, true, false)]);
        b.wall_seconds = 3.0;
        let fwd = aggregate(&[a.clone(), b.clone()]).unwrap();
        let rev = aggregate(&[b, a]).unwrap();
        assert!((fwd.wall_seconds.mean - rev.wall_seconds.mean).abs() < 1e-12);
        assert!((fwd.wall_seconds.sd - rev.wall_seconds.sd).abs() < 1e-12);
    }

    #[test]
    fn retry_tokens_sums_flagged_calls() {
        let r = report(vec![
            call("S1", 1, true, false),
            call("S1", 2, true, false),
        ]);
        assert_eq!(retry_tokens(&r), 150);
        assert_eq!(r.baseline_tokens(), 150);
    }

    #[test]
    fn clean_run_retry_tokens_zero() {
        let r = report(vec![call("S1", 1, true, false)]);
        assert_eq!(retry_tokens(&r), 0);
    }

    #[test]
    fn failure_rate_counts_natural_failures_per_execution() {
        let mut reports: Vec<RunReport> = (0..98)
            .map(|_| report(vec![call("S2", 1, true, false)]))
            .collect();
        for _ in 0..2 {
            reports.push(report(vec![
                call("S2", 1, false, false),
                call("S2", 2, true, false),
            ]));
        }
        assert_eq!(failure_rate(&reports, "S2"), 0.02);
    }

    #[test]
    fn injected_failures_do_not_count() {
        let reports = vec![report(vec![
            call("S3", 1, false, true),
            call("S3", 2, true, false),
        ])];
        assert_eq!(failure_rate(&reports, "S3"), 0.0);
    }

    #[test]
    fn all_attempts_failing_is_full_rate() {
        let reports = vec![report(vec![
            call("S1", 1, false, false),
            call("S1", 2, false, false),
            call("S1", 3, false, false),
        ])];
        assert_eq!(failure_rate(&reports, "S1"), 1.0);
    }
}

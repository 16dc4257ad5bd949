//! Run reporting: a line-delimited JSON record stream that round-trips
//! back into reports, an aligned comparison table across strategies, and a
//! CSV export of the aggregates.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{
    AggregateTable, CallRecord, MetricsError, RunOutcome, RunReport, Stat, StateSnapshotEntry,
};
use crate::pipeline::Strategy;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("record stream has no run summaries")]
    NoRuns,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// One line of the record stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReportLine {
    Call {
        pipeline: String,
        strategy: Strategy,
        #[serde(flatten)]
        call: CallRecord,
    },
    State {
        pipeline: String,
        strategy: Strategy,
        run_index: u32,
        #[serde(flatten)]
        entry: StateSnapshotEntry,
    },
    RunSummary {
        pipeline: String,
        strategy: Strategy,
        run_index: u32,
        total_tokens: u64,
        retry_tokens: u64,
        baseline_tokens: u64,
        wall_seconds: f64,
        model_seconds: f64,
        framework_seconds: f64,
        outcome: RunOutcome,
        correct: bool,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        low_content: Vec<String>,
    },
}

/// Emit one run as JSONL: every call, the final state, then the summary.
pub fn write_jsonl(report: &RunReport, out: &mut dyn Write) -> io::Result<()> {
    for call in &report.calls {
        let line = ReportLine::Call {
            pipeline: report.pipeline_id.clone(),
            strategy: report.strategy,
            call: call.clone(),
        };
        serde_json::to_writer(&mut *out, &line)?;
        out.write_all(b"\n")?;
    }
    for entry in &report.final_state {
        let line = ReportLine::State {
            pipeline: report.pipeline_id.clone(),
            strategy: report.strategy,
            run_index: report.run_index,
            entry: entry.clone(),
        };
        serde_json::to_writer(&mut *out, &line)?;
        out.write_all(b"\n")?;
    }
    let summary = ReportLine::RunSummary {
        pipeline: report.pipeline_id.clone(),
        strategy: report.strategy,
        run_index: report.run_index,
        total_tokens: report.total_tokens,
        retry_tokens: report.retry_tokens,
        baseline_tokens: report.baseline_tokens(),
        wall_seconds: report.wall_seconds,
        model_seconds: report.model_seconds,
        framework_seconds: report.framework_seconds,
        outcome: report.outcome,
        correct: report.correct,
        low_content: report.low_content.clone(),
    };
    serde_json::to_writer(&mut *out, &summary)?;
    out.write_all(b"\n")
}

pub fn parse_jsonl(text: &str) -> Result<Vec<ReportLine>, ReportError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ReportError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Rebuild per-run reports from a parsed record stream. Calls and state
/// lines are matched to their summary by (pipeline, strategy, run index).
pub fn reconstruct(lines: &[ReportLine]) -> Result<Vec<RunReport>, ReportError> {
    type Key = (String, String, u32);
    let mut calls: BTreeMap<Key, Vec<CallRecord>> = BTreeMap::new();
    let mut states: BTreeMap<Key, Vec<StateSnapshotEntry>> = BTreeMap::new();
    let mut reports = Vec::new();
    for line in lines {
        match line {
            ReportLine::Call {
                pipeline,
                strategy,
                call,
            } => calls
                .entry((pipeline.clone(), strategy.name().to_string(), call.run_index))
                .or_default()
                .push(call.clone()),
            ReportLine::State {
                pipeline,
                strategy,
                run_index,
                entry,
            } => states
                .entry((pipeline.clone(), strategy.name().to_string(), *run_index))
                .or_default()
                .push(entry.clone()),
            ReportLine::RunSummary {
                pipeline,
                strategy,
                run_index,
                total_tokens,
                retry_tokens,
                baseline_tokens: _,
                wall_seconds,
                model_seconds,
                framework_seconds,
                outcome,
                correct,
                low_content,
            } => {
                let key = (pipeline.clone(), strategy.name().to_string(), *run_index);
                reports.push(RunReport {
                    pipeline_id: pipeline.clone(),
                    strategy: *strategy,
                    run_index: *run_index,
                    calls: calls.remove(&key).unwrap_or_default(),
                    total_tokens: *total_tokens,
                    retry_tokens: *retry_tokens,
                    wall_seconds: *wall_seconds,
                    model_seconds: *model_seconds,
                    framework_seconds: *framework_seconds,
                    outcome: *outcome,
                    correct: *correct,
                    low_content: low_content.clone(),
                    final_state: states.remove(&key).unwrap_or_default(),
                });
            }
        }
    }
    if reports.is_empty() {
        return Err(ReportError::NoRuns);
    }
    Ok(reports)
}

fn fmt_stat(stat: &Stat, decimals: usize) -> String {
    if stat.sd == 0.0 {
        format!("{:.*}", decimals, stat.mean)
    } else {
        format!("{:.*} \u{b1} {:.*}", decimals, stat.mean, decimals, stat.sd)
    }
}

/// Aligned comparison table: one column per strategy, the shared metric
/// rows, and retry-cost deltas between strategies underneath.
pub fn render_table(tables: &[AggregateTable]) -> String {
    let rows: [(&str, Box<dyn Fn(&AggregateTable) -> String>); 5] = [
        ("Tokens", Box::new(|t| fmt_stat(&t.tokens, 0))),
        ("Latency s", Box::new(|t| fmt_stat(&t.wall_seconds, 2))),
        ("LLM API s", Box::new(|t| fmt_stat(&t.model_seconds, 2))),
        ("Framework s", Box::new(|t| fmt_stat(&t.framework_seconds, 2))),
        ("LLM calls", Box::new(|t| fmt_stat(&t.llm_calls, 1))),
    ];
    let mut cells: Vec<Vec<String>> = Vec::new();
    let mut header = vec![String::new()];
    header.extend(tables.iter().map(|t| t.strategy.name().to_string()));
    cells.push(header);
    for (label, f) in &rows {
        let mut row = vec![label.to_string()];
        row.extend(tables.iter().map(|t| f(t)));
        cells.push(row);
    }
    let mut correct_row = vec!["Correct".to_string()];
    correct_row.extend(
        tables
            .iter()
            .map(|t| format!("{}/{}", (t.correct_fraction * t.repetitions as f64).round(), t.repetitions)),
    );
    cells.push(correct_row);
    let mut retry_row = vec!["Retry tokens".to_string()];
    retry_row.extend(tables.iter().map(|t| fmt_stat(&t.retry_tokens, 0)));
    cells.push(retry_row);

    let cols = cells[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    if let Some(first) = tables.first() {
        out.push_str(&format!(
            "pipeline {} ({} repetitions)\n",
            first.pipeline_id, first.repetitions
        ));
    }
    for row in &cells {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c == 0 {
                line.push_str(&format!("{:<width$}", cell, width = widths[0]));
            } else {
                line.push_str(&format!("  {:>width$}", cell, width = widths[c]));
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out.push_str(&render_retry_deltas(tables));
    out
}

fn find<'a>(tables: &'a [AggregateTable], strategy: Strategy) -> Option<&'a AggregateTable> {
    tables.iter().find(|t| t.strategy == strategy)
}

/// Pairwise retry-cost comparisons, rendered as signed percentages of the
/// baseline strategy in each pair.
pub fn render_retry_deltas(tables: &[AggregateTable]) -> String {
    let mut out = String::new();
    let pairs = [
        (Strategy::Static, Strategy::Monolithic),
        (Strategy::Rstd, Strategy::Monolithic),
        (Strategy::Rstd, Strategy::Static),
    ];
    for (subject, baseline) in pairs {
        let (Some(s), Some(b)) = (find(tables, subject), find(tables, baseline)) else {
            continue;
        };
        if b.retry_tokens.mean == 0.0 {
            continue;
        }
        let delta = (s.retry_tokens.mean / b.retry_tokens.mean - 1.0) * 100.0;
        out.push_str(&format!(
            "retry tokens {} vs {}: {:+.1}%\n",
            subject.name(),
            baseline.name(),
            delta
        ));
    }
    out
}

/// CSV export of the aggregates: one row per strategy, mean and sd per
/// metric.
pub fn render_csv(tables: &[AggregateTable]) -> String {
    let mut out = String::from(
        "pipeline,strategy,repetitions,tokens_mean,tokens_sd,retry_tokens_mean,retry_tokens_sd,\
         total_tokens_mean,total_tokens_sd,wall_seconds_mean,wall_seconds_sd,\
         model_seconds_mean,model_seconds_sd,framework_seconds_mean,framework_seconds_sd,\
         llm_calls_mean,llm_calls_sd,correct_fraction\n",
    );
    for t in tables {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}\n",
            t.pipeline_id,
            t.strategy.name(),
            t.repetitions,
            t.tokens.mean,
            t.tokens.sd,
            t.retry_tokens.mean,
            t.retry_tokens.sd,
            t.total_tokens.mean,
            t.total_tokens.sd,
            t.wall_seconds.mean,
            t.wall_seconds.sd,
            t.model_seconds.mean,
            t.model_seconds.sd,
            t.framework_seconds.mean,
            t.framework_seconds.sd,
            t.llm_calls.mean,
            t.llm_calls.sd,
            t.correct_fraction
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::aggregate;

    fn sample_report(run_index: u32) -> RunReport {
        let calls = vec![
            CallRecord {
                run_index,
                subtask: "S1".to_string(),
                attempt: 1,
                prompt_tokens: 100,
                completion_tokens: 600,
                model_latency: 0.1,
                framework_latency: 0.01,
                validation_passed: true,
                retry_flag: false,
                injection_applied: false,
            },
            CallRecord {
                run_index,
                subtask: "S1".to_string(),
                attempt: 2,
                prompt_tokens: 100,
                completion_tokens: 336,
                model_latency: 0.1,
                framework_latency: 0.01,
                validation_passed: true,
                retry_flag: true,
                injection_applied: false,
            },
        ];
        RunReport {
            pipeline_id: "uc2".to_string(),
            strategy: Strategy::Rstd,
            run_index,
            calls,
            total_tokens: 1136,
            retry_tokens: 436,
            wall_seconds: 0.25,
            model_seconds: 0.2,
            framework_seconds: 0.05,
            outcome: RunOutcome::Success,
            correct: true,
            low_content: vec![],
            final_state: vec![StateSnapshotEntry {
                subtask_id: "S1".to_string(),
                status: crate::state::SubtaskStatus::Completed,
                attempts: 2,
                prompt_tokens: 100,
                completion_tokens: 336,
                value: Some(serde_json::json!({"ok": true})),
            }],
        }
    }

    #[test]
    fn jsonl_round_trips() {
        let report = sample_report(0);
        let mut buf = Vec::new();
        write_jsonl(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        let lines = parse_jsonl(&text).unwrap();
        let rebuilt = reconstruct(&lines).unwrap();
        assert_eq!(rebuilt, vec![report]);
    }

    #[test]
    fn every_line_is_object_with_kind() {
        let mut buf = Vec::new();
        write_jsonl(&sample_report(0), &mut buf).unwrap();
        for line in String::from_utf8(buf).unwrap().lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("kind").is_some(), "line lacks kind: {line}");
        }
    }

    #[test]
    fn garbage_line_reports_line_number() {
        let err = parse_jsonl("{\"kind\": \"nope\"}\n").unwrap_err();
        assert!(matches!(err, ReportError::Parse { line: 1, .. }));
    }

    #[test]
    fn table_has_strategy_columns_and_deltas() {
        let rstd = aggregate(&[sample_report(0), sample_report(1)]).unwrap();
        let mut mono = rstd.clone();
        mono.strategy = Strategy::Monolithic;
        mono.retry_tokens = Stat {
            mean: 904.0,
            sd: 0.0,
        };
        let rendered = render_table(&[mono, rstd]);
        assert!(rendered.contains("monolithic"));
        assert!(rendered.contains("rstd"));
        assert!(rendered.contains("Tokens"));
        assert!(rendered.contains("Retry tokens"));
        assert!(rendered.contains("retry tokens rstd vs monolithic: -51.8%"));
    }

    #[test]
    fn csv_has_row_per_strategy() {
        let rstd = aggregate(&[sample_report(0)]).unwrap();
        let mut mono = rstd.clone();
        mono.strategy = Strategy::Monolithic;
        let csv = render_csv(&[mono, rstd]);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("uc2,monolithic"));
    }
}

//! `rstd`: validate pipeline configs, execute single runs, and benchmark
//! the three execution strategies against scripted or live backends.

use std::fs;
use std::io::Write;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use rstd_core::assets::{bundled_pipeline, bundled_script};
use rstd_core::backend::{BackendError, BackendRegistry, MockBackend, MockScript};
use rstd_core::bench::{run_bench, BenchPlan};
use rstd_core::engine::{run, EngineError, RunConfig};
use rstd_core::http::{HttpBackend, HttpBackendConfig};
use rstd_core::inject::InjectionSpec;
use rstd_core::metrics::{aggregate, RunOutcome, RunReport};
use rstd_core::pipeline::{parse_pipeline, PipelineSpec, Strategy};
use rstd_core::report::{parse_jsonl, reconstruct, render_csv, render_table, write_jsonl};

const EXIT_CONFIG: u8 = 2;
const EXIT_HARD_FAILURE: u8 = 3;
const EXIT_TRANSPORT: u8 = 4;

#[derive(Parser)]
#[command(name = "rstd", about = "Run decomposed model pipelines under monolithic, static, and runtime-structured strategies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a pipeline config and print diagnostics.
    Validate {
        /// Bundled pipeline name (uc1, uc2) or a path to a config file.
        #[arg(long)]
        pipeline: String,
    },
    /// Execute one run and emit its record stream.
    Run {
        #[arg(long)]
        pipeline: String,
        #[arg(long)]
        strategy: Strategy,
        #[command(flatten)]
        backend: BackendArgs,
        /// Fault injection as key=value tokens: target= attempt= mode= path=
        #[arg(long, num_args = 1..=4)]
        inject: Option<Vec<String>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run repetitions across strategies and print the comparison table.
    Bench {
        #[arg(long)]
        pipeline: String,
        /// Comma-separated subset of monolithic,static,rstd; default all.
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<Strategy>>,
        #[arg(long, default_value_t = 1)]
        repetitions: u32,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long, num_args = 1..=4)]
        inject: Option<Vec<String>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the merged record stream to this file.
        #[arg(long)]
        records: Option<String>,
        /// Write the aggregate table as CSV to this file.
        #[arg(long)]
        csv: Option<String>,
    },
    /// Re-render tables from a previously emitted record stream.
    Report {
        #[arg(long)]
        records: String,
        #[arg(long)]
        csv: Option<String>,
    },
}

#[derive(Args)]
struct BackendArgs {
    /// `mock:<bundled name or script path>` or `http:<config path>`.
    #[arg(long, default_value = "mock:uc2-script")]
    backend: String,
}

struct CliError {
    message: String,
    code: u8,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            code: EXIT_CONFIG,
        }
    }
}

impl From<EngineError> for CliError {
    fn from(err: EngineError) -> Self {
        let code = match &err {
            EngineError::Backend(BackendError::Transport(_)) => EXIT_TRANSPORT,
            _ => EXIT_CONFIG,
        };
        Self {
            message: err.to_string(),
            code,
        }
    }
}

fn load_pipeline(reference: &str) -> Result<PipelineSpec, CliError> {
    let document = match bundled_pipeline(reference) {
        Some(text) => text.to_string(),
        None => fs::read_to_string(reference)
            .map_err(|e| CliError::config(format!("cannot read pipeline `{reference}`: {e}")))?,
    };
    parse_pipeline(&document).map_err(|e| CliError::config(e.to_string()))
}

fn make_registry(backend: &str) -> Result<BackendRegistry, CliError> {
    if let Some(reference) = backend.strip_prefix("mock:") {
        let document = match bundled_script(reference) {
            Some(text) => text.to_string(),
            None => fs::read_to_string(reference)
                .map_err(|e| CliError::config(format!("cannot read script `{reference}`: {e}")))?,
        };
        let script =
            MockScript::parse(&document).map_err(|e| CliError::config(e.to_string()))?;
        Ok(BackendRegistry::with_default(Arc::new(MockBackend::new(
            script,
        ))))
    } else if let Some(path) = backend.strip_prefix("http:") {
        let document = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read backend config `{path}`: {e}")))?;
        let config =
            HttpBackendConfig::parse(&document).map_err(|e| CliError::config(e.to_string()))?;
        let http = HttpBackend::new(config).map_err(|e| CliError {
            message: e.to_string(),
            code: EXIT_TRANSPORT,
        })?;
        Ok(BackendRegistry::with_default(Arc::new(http)))
    } else {
        Err(CliError::config(format!(
            "backend must be mock:<ref> or http:<path>, got `{backend}`"
        )))
    }
}

fn parse_injection(parts: Option<Vec<String>>) -> Result<Option<InjectionSpec>, CliError> {
    match parts {
        None => Ok(None),
        Some(parts) => InjectionSpec::from_key_values(&parts)
            .map(Some)
            .map_err(|e| CliError::config(e.to_string())),
    }
}

fn summary_line(report: &RunReport) -> String {
    format!(
        "{} {}: outcome={} correct={} tokens={} retry_tokens={} calls={} wall={:.2}s model={:.2}s framework={:.2}s",
        report.pipeline_id,
        report.strategy.name(),
        match report.outcome {
            RunOutcome::Success => "success",
            RunOutcome::HardFailure => "hard_failure",
        },
        report.correct,
        report.baseline_tokens(),
        report.retry_tokens,
        report.llm_calls(),
        report.wall_seconds,
        report.model_seconds,
        report.framework_seconds,
    )
}

fn cmd_validate(pipeline: &str) -> Result<(), CliError> {
    load_pipeline(pipeline)?;
    println!("valid");
    Ok(())
}

fn cmd_run(
    pipeline: &str,
    strategy: Strategy,
    backend: &str,
    inject: Option<Vec<String>>,
    seed: u64,
) -> Result<u8, CliError> {
    let spec = load_pipeline(pipeline)?;
    let registry = make_registry(backend)?;
    let config = RunConfig {
        strategy,
        repetitions: 1,
        seed,
        injection: parse_injection(inject)?,
    };
    let report = run(&spec, &config, &registry)?;
    let stdout = std::io::stdout();
    write_jsonl(&report, &mut stdout.lock())
        .map_err(|e| CliError::config(format!("cannot write records: {e}")))?;
    eprintln!("{}", summary_line(&report));
    Ok(match report.outcome {
        RunOutcome::Success => 0,
        RunOutcome::HardFailure => EXIT_HARD_FAILURE,
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    pipeline: &str,
    strategies: Option<Vec<Strategy>>,
    repetitions: u32,
    backend: &str,
    inject: Option<Vec<String>>,
    seed: u64,
    records: Option<String>,
    csv: Option<String>,
) -> Result<(), CliError> {
    if repetitions == 0 {
        return Err(CliError::config("repetitions must be at least 1"));
    }
    let spec = load_pipeline(pipeline)?;
    let registry = make_registry(backend)?;
    let plan = BenchPlan {
        strategies: strategies.unwrap_or_else(|| Strategy::all().to_vec()),
        repetitions,
        seed,
        injection: parse_injection(inject)?,
    };
    if plan.strategies.is_empty() {
        return Err(CliError::config("at least one strategy is required"));
    }
    let result = run_bench(&spec, &plan, &registry)?;
    if let Some(path) = records {
        let mut buf = Vec::new();
        for report in &result.reports {
            write_jsonl(report, &mut buf)
                .map_err(|e| CliError::config(format!("cannot serialize records: {e}")))?;
        }
        fs::write(&path, buf)
            .map_err(|e| CliError::config(format!("cannot write `{path}`: {e}")))?;
    }
    if let Some(path) = csv {
        fs::write(&path, render_csv(&result.tables))
            .map_err(|e| CliError::config(format!("cannot write `{path}`: {e}")))?;
    }
    print!("{}", render_table(&result.tables));
    let hard_failures = result
        .reports
        .iter()
        .filter(|r| r.outcome == RunOutcome::HardFailure)
        .count();
    if hard_failures > 0 {
        println!("warning: {hard_failures} run(s) hard-failed; results are partial");
    }
    std::io::stdout()
        .flush()
        .map_err(|e| CliError::config(e.to_string()))?;
    Ok(())
}

fn cmd_report(records: &str, csv: Option<String>) -> Result<(), CliError> {
    let text = fs::read_to_string(records)
        .map_err(|e| CliError::config(format!("cannot read `{records}`: {e}")))?;
    let lines = parse_jsonl(&text).map_err(|e| CliError::config(e.to_string()))?;
    let reports = reconstruct(&lines).map_err(|e| CliError::config(e.to_string()))?;

    // Group by pipeline, then strategy, preserving first-seen order.
    let mut pipelines: Vec<String> = Vec::new();
    for report in &reports {
        if !pipelines.contains(&report.pipeline_id) {
            pipelines.push(report.pipeline_id.clone());
        }
    }
    let mut all_tables = Vec::new();
    for pipeline in &pipelines {
        let mut strategies: Vec<Strategy> = Vec::new();
        for report in reports.iter().filter(|r| &r.pipeline_id == pipeline) {
            if !strategies.contains(&report.strategy) {
                strategies.push(report.strategy);
            }
        }
        let mut tables = Vec::new();
        for strategy in strategies {
            let group: Vec<RunReport> = reports
                .iter()
                .filter(|r| &r.pipeline_id == pipeline && r.strategy == strategy)
                .cloned()
                .collect();
            tables.push(aggregate(&group).map_err(|e| CliError::config(e.to_string()))?);
        }
        print!("{}", render_table(&tables));
        all_tables.extend(tables);
    }
    if let Some(path) = csv {
        fs::write(&path, render_csv(&all_tables))
            .map_err(|e| CliError::config(format!("cannot write `{path}`: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Validate { pipeline } => cmd_validate(&pipeline).map(|()| 0),
        Command::Run {
            pipeline,
            strategy,
            backend,
            inject,
            seed,
        } => cmd_run(&pipeline, strategy, &backend.backend, inject, seed),
        Command::Bench {
            pipeline,
            strategies,
            repetitions,
            backend,
            inject,
            seed,
            records,
            csv,
        } => cmd_bench(
            &pipeline,
            strategies,
            repetitions,
            &backend.backend,
            inject,
            seed,
            records,
            csv,
        )
        .map(|()| 0),
        Command::Report { records, csv } => cmd_report(&records, csv).map(|()| 0),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {}", err.message);
            ExitCode::from(err.code)
        }
    }
}

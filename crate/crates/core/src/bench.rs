//! Benchmark harness: run a pipeline repeatedly under each selected
//! strategy against one backend, collect per-run reports, and aggregate.

use crate::backend::BackendRegistry;
use crate::engine::{run_indexed, EngineError, RunConfig};
use crate::inject::InjectionSpec;
use crate::metrics::{aggregate, AggregateTable, RunReport};
use crate::pipeline::{PipelineSpec, Strategy};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchPlan {
    pub strategies: Vec<Strategy>,
    pub repetitions: u32,
    pub seed: u64,
    pub injection: Option<InjectionSpec>,
}

impl Default for BenchPlan {
    fn default() -> Self {
        Self {
            strategies: Strategy::all().to_vec(),
            repetitions: 1,
            seed: 0,
            injection: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub reports: Vec<RunReport>,
    pub tables: Vec<AggregateTable>,
}

impl BenchResult {
    pub fn reports_for(&self, strategy: Strategy) -> Vec<&RunReport> {
        self.reports
            .iter()
            .filter(|r| r.strategy == strategy)
            .collect()
    }
}

/// Execute the plan sequentially: repetitions within a strategy, then the
/// next strategy. One aggregate table per strategy, in plan order.
pub fn run_bench(
    pipeline: &PipelineSpec,
    plan: &BenchPlan,
    registry: &BackendRegistry,
) -> Result<BenchResult, EngineError> {
    let mut reports = Vec::new();
    let mut tables = Vec::new();
    for &strategy in &plan.strategies {
        let config = RunConfig {
            strategy,
            repetitions: plan.repetitions,
            seed: plan.seed,
            injection: plan.injection.clone(),
        };
        let mut strategy_reports = Vec::new();
        for run_index in 0..plan.repetitions {
            strategy_reports.push(run_indexed(pipeline, &config, registry, run_index)?);
        }
        tables.push(aggregate(&strategy_reports).expect("same strategy and pipeline"));
        reports.extend(strategy_reports);
    }
    Ok(BenchResult { reports, tables })
}

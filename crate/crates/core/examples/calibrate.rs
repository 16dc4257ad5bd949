//! Prints prompt token counts per call for the bundled scenarios. Used to
//! derive the completion_tokens overrides in the bundled mock scripts:
//! override = desired per-call total - prompt tokens shown here.

use std::sync::Arc;

use rstd_core::assets::{bundled_pipeline, bundled_script};
use rstd_core::backend::{BackendRegistry, MockBackend, MockScript};
use rstd_core::engine::{run, RunConfig};
use rstd_core::inject::InjectionSpec;
use rstd_core::pipeline::{parse_pipeline, Strategy};

fn main() {
    for (name, target, path) in [("uc1", "A3", "$.passed"), ("uc2", "S3", "$.confidence")] {
        let pipeline = parse_pipeline(bundled_pipeline(name).unwrap()).unwrap();
        let script = MockScript::parse(bundled_script(&format!("{name}-script")).unwrap()).unwrap();
        let registry =
            BackendRegistry::with_default(Arc::new(MockBackend::without_sleep(script)));
        let injection = InjectionSpec::from_key_values(&[
            format!("target={target}"),
            "attempt=1".to_string(),
            "mode=corrupt_response".to_string(),
            format!("path={path}"),
        ])
        .unwrap();
        for strategy in Strategy::all() {
            let mut config = RunConfig::new(strategy);
            config.injection = Some(injection.clone());
            let report = run(&pipeline, &config, &registry).unwrap();
            for call in &report.calls {
                println!(
                    "{name} {} {}@{} prompt={} completion={} total={}",
                    strategy.name(),
                    call.subtask,
                    call.attempt,
                    call.prompt_tokens,
                    call.completion_tokens,
                    call.prompt_tokens + call.completion_tokens
                );
            }
        }
    }
}

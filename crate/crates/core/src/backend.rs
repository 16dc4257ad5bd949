//! Completion backends: a uniform interface with token and latency
//! reporting, a deterministic scripted mock, and a registry for
//! per-subtask model substitution.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MONOLITHIC_CALL_ID: &str = "monolithic";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("mock script has no entry for ({subtask}, attempt {attempt})")]
    ScriptMiss { subtask: String, attempt: u32 },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("no backend registered for model ref `{0}`")]
    UnknownModelRef(String),
    #[error("malformed mock script: {0}")]
    Script(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRequest {
    pub model_ref: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_output_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Simulated or measured seconds spent inside the model call.
    pub model_latency: f64,
}

/// Identifies one call within a run: subtask (or `monolithic`), the
/// attempt number at that subtask, and the repetition index.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CallKey {
    pub subtask: String,
    pub attempt: u32,
    pub run_index: u32,
}

pub trait ModelBackend: Send + Sync {
    fn complete(&self, request: &ModelRequest, call_key: &CallKey)
        -> Result<ModelResponse, BackendError>;
}

/// Deterministic token approximation: one token per four characters,
/// rounded up.
pub fn count_tokens(text: &str) -> u64 {
    (text.chars().count() as u64 + 3) / 4
}

/// One scripted response, keyed by subtask id and attempt number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockEntry {
    pub subtask: String,
    pub attempt: u32,
    pub response_text: String,
    /// Calibration override; without it the chars/4 approximation applies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
    #[serde(default)]
    pub simulated_latency: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter_seed: Option<u64>,
}

/// Entries that replace the base script for specific repetitions, used to
/// script run-dependent behavior such as natural validation failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOverride {
    pub run_index: u32,
    pub entries: Vec<MockEntry>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    pub entries: Vec<MockEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub run_overrides: Vec<RunOverride>,
}

impl MockScript {
    pub fn parse(document: &str) -> Result<Self, BackendError> {
        let script: MockScript =
            serde_json::from_str(document).map_err(|e| BackendError::Script(e.to_string()))?;
        script.check()?;
        Ok(script)
    }

    /// Attempt keys must be dense from 1 for every scripted subtask.
    fn check(&self) -> Result<(), BackendError> {
        let mut by_subtask: HashMap<&str, Vec<u32>> = HashMap::new();
        for entry in self.entries.iter() {
            by_subtask
                .entry(entry.subtask.as_str())
                .or_default()
                .push(entry.attempt);
        }
        for (subtask, mut attempts) in by_subtask {
            attempts.sort_unstable();
            attempts.dedup();
            for (i, attempt) in attempts.iter().enumerate() {
                if *attempt != i as u32 + 1 {
                    return Err(BackendError::Script(format!(
                        "attempts for `{subtask}` are not dense from 1"
                    )));
                }
            }
        }
        Ok(())
    }

    fn lookup(&self, key: &CallKey) -> Option<&MockEntry> {
        let from_override = self
            .run_overrides
            .iter()
            .filter(|o| o.run_index == key.run_index)
            .flat_map(|o| o.entries.iter())
            .find(|e| e.subtask == key.subtask && e.attempt == key.attempt);
        from_override.or_else(|| {
            self.entries
                .iter()
                .find(|e| e.subtask == key.subtask && e.attempt == key.attempt)
        })
    }
}

/// Scripted backend: a pure function of (script, request, call key). It
/// sleeps for the simulated latency so the run-level latency split is
/// measurable against real wall time.
pub struct MockBackend {
    script: Arc<MockScript>,
    sleep: bool,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self {
            script: Arc::new(script),
            sleep: true,
        }
    }

    /// Test helper: report simulated latency without actually sleeping.
    pub fn without_sleep(script: MockScript) -> Self {
        Self {
            script: Arc::new(script),
            sleep: false,
        }
    }
}

fn jitter(seed: u64, key: &CallKey, base: f64) -> f64 {
    let mut hash: u64 = seed;
    for byte in key.subtask.bytes() {
        hash = hash.wrapping_mul(31).wrapping_add(byte as u64);
    }
    hash = hash
        .wrapping_mul(31)
        .wrapping_add(key.attempt as u64)
        .wrapping_mul(31)
        .wrapping_add(key.run_index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(hash);
    rng.gen_range(0.0..=0.1) * base
}

impl ModelBackend for MockBackend {
    fn complete(
        &self,
        request: &ModelRequest,
        call_key: &CallKey,
    ) -> Result<ModelResponse, BackendError> {
        let entry = self
            .script
            .lookup(call_key)
            .ok_or_else(|| BackendError::ScriptMiss {
                subtask: call_key.subtask.clone(),
                attempt: call_key.attempt,
            })?;
        let latency = match entry.jitter_seed {
            Some(seed) => entry.simulated_latency + jitter(seed, call_key, entry.simulated_latency),
            None => entry.simulated_latency,
        };
        if self.sleep && latency > 0.0 {
            std::thread::sleep(std::time::Duration::from_secs_f64(latency));
        }
        Ok(ModelResponse {
            text: entry.response_text.clone(),
            prompt_tokens: count_tokens(&request.prompt),
            completion_tokens: entry
                .completion_tokens
                .unwrap_or_else(|| count_tokens(&entry.response_text)),
            model_latency: latency,
        })
    }
}

/// Maps model refs to backends. A `default` entry serves any ref without
/// an explicit binding, so subtasks can swap models without touching the
/// orchestration layer.
#[derive(Clone, Default)]
pub struct BackendRegistry {
    backends: HashMap<String, Arc<dyn ModelBackend>>,
}

pub const DEFAULT_MODEL_REF: &str = "default";

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_default(backend: Arc<dyn ModelBackend>) -> Self {
        let mut registry = Self::new();
        registry.register(DEFAULT_MODEL_REF, backend);
        registry
    }

    pub fn register(&mut self, model_ref: &str, backend: Arc<dyn ModelBackend>) {
        self.backends.insert(model_ref.to_string(), backend);
    }

    pub fn resolve(&self, model_ref: &str) -> Result<&Arc<dyn ModelBackend>, BackendError> {
        self.backends
            .get(model_ref)
            .or_else(|| self.backends.get(DEFAULT_MODEL_REF))
            .ok_or_else(|| BackendError::UnknownModelRef(model_ref.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn script() -> MockScript {
        MockScript {
            entries: vec![
                MockEntry {
                    subtask: "S3".to_string(),
                    attempt: 1,
                    response_text: "{\"ok\":true}".to_string(),
                    completion_tokens: Some(436),
                    simulated_latency: 0.0,
                    jitter_seed: None,
                },
                MockEntry {
                    subtask: "S3".to_string(),
                    attempt: 2,
                    response_text: "{\"ok\":true}".to_string(),
                    completion_tokens: None,
                    simulated_latency: 0.0,
                    jitter_seed: None,
                },
            ],
            run_overrides: vec![],
        }
    }

    fn key(subtask: &str, attempt: u32) -> CallKey {
        CallKey {
            subtask: subtask.to_string(),
            attempt,
            run_index: 0,
        }
    }

    fn request(prompt: &str) -> ModelRequest {
        ModelRequest {
            model_ref: "default".to_string(),
            prompt: prompt.to_string(),
            temperature: 0.0,
            max_output_tokens: None,
        }
    }

    #[test]
    fn count_tokens_is_ceiling_of_quarters() {
        assert_eq!(count_tokens(""), 0);
        assert_eq!(count_tokens("12345678"), 2);
        assert_eq!(count_tokens("123456789"), 3);
        assert_eq!(count_tokens("1"), 1);
    }

    #[test]
    fn override_completion_tokens_used() {
        let backend = MockBackend::without_sleep(script());
        let resp = backend.complete(&request("hello world!"), &key("S3", 1)).unwrap();
        assert_eq!(resp.completion_tokens, 436);
        assert_eq!(resp.prompt_tokens, count_tokens("hello world!"));
    }

    #[test]
    fn fallback_counts_response_text() {
        let backend = MockBackend::without_sleep(script());
        let resp = backend.complete(&request("p"), &key("S3", 2)).unwrap();
        assert_eq!(resp.completion_tokens, count_tokens("{\"ok\":true}"));
    }

    #[test]
    fn unknown_key_is_script_miss() {
        let backend = MockBackend::without_sleep(script());
        assert!(matches!(
            backend.complete(&request("p"), &key("S9", 1)),
            Err(BackendError::ScriptMiss { .. })
        ));
    }

    #[test]
    fn identical_calls_identical_responses() {
        let backend = MockBackend::without_sleep(script());
        let a = backend.complete(&request("p"), &key("S3", 1)).unwrap();
        let b = backend.complete(&request("p"), &key("S3", 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn jitter_is_deterministic_and_bounded() {
        let mut s = script();
        s.entries[0].simulated_latency = 1.0;
        s.entries[0].jitter_seed = Some(7);
        let backend = MockBackend::without_sleep(s);
        let a = backend.complete(&request("p"), &key("S3", 1)).unwrap();
        let b = backend.complete(&request("p"), &key("S3", 1)).unwrap();
        assert_eq!(a.model_latency, b.model_latency);
        assert!(a.model_latency >= 1.0 && a.model_latency <= 1.1);
    }

    #[test]
    fn run_override_takes_precedence() {
        let mut s = script();
        s.run_overrides.push(RunOverride {
            run_index: 7,
            entries: vec![MockEntry {
                subtask: "S3".to_string(),
                attempt: 1,
                response_text: "override".to_string(),
                completion_tokens: None,
                simulated_latency: 0.0,
                jitter_seed: None,
            }],
        });
        let backend = MockBackend::without_sleep(s);
        let normal = backend.complete(&request("p"), &key("S3", 1)).unwrap();
        assert_eq!(normal.text, "{\"ok\":true}");
        let overridden = backend
            .complete(
                &request("p"),
                &CallKey {
                    subtask: "S3".to_string(),
                    attempt: 1,
                    run_index: 7,
                },
            )
            .unwrap();
        assert_eq!(overridden.text, "override");
    }

    #[test]
    fn non_dense_attempts_rejected() {
        let doc = serde_json::json!({
            "entries": [
                {"subtask": "S1", "attempt": 2, "response_text": "x"}
            ]
        });
        assert!(matches!(
            MockScript::parse(&doc.to_string()),
            Err(BackendError::Script(_))
        ));
    }

    #[test]
    fn registry_falls_back_to_default() {
        let registry =
            BackendRegistry::with_default(Arc::new(MockBackend::without_sleep(script())));
        assert!(registry.resolve("default").is_ok());
        assert!(registry.resolve("gpt-4").is_ok());
        let empty = BackendRegistry::new();
        assert!(matches!(
            empty.resolve("gpt-4"),
            Err(BackendError::UnknownModelRef(_))
        ));
    }
}

//! Validation-gated run state: validated subtask outputs keyed by subtask
//! id, status tracking, and bounded per-subtask context assembly.
//!
//! Failed outputs are never stored, so they cannot leak into downstream
//! prompts. A store instance is owned by a single run.

use std::collections::{BTreeMap, HashSet};

use serde_json::Value;
use thiserror::Error;

use crate::pipeline::{PipelineSpec, SubtaskSpec, ROOT_SOURCE};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StateError {
    #[error("subtask `{0}` already has a completed entry")]
    AlreadyCompleted(String),
    #[error("unknown subtask `{0}`")]
    UnknownSubtask(String),
    #[error("invalid status transition for `{id}`: {from:?} -> {to:?}")]
    InvalidTransition {
        id: String,
        from: SubtaskStatus,
        to: SubtaskStatus,
    },
    #[error("subtask `{id}` is not completed (status {status:?})")]
    NotCompleted { id: String, status: SubtaskStatus },
    #[error("required input `{key}` of `{consumer}` unavailable: producer `{producer}` is {status:?}")]
    MissingRequiredInput {
        consumer: String,
        key: String,
        producer: String,
        status: SubtaskStatus,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubtaskStatus {
    Pending,
    Completed,
    Failed,
    Skipped,
}

/// Token counts for the accepted attempt of a subtask.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EntryMeta {
    pub attempts: u32,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateEntry {
    pub value: Option<Value>,
    pub attempts: u32,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub status: SubtaskStatus,
}

impl StateEntry {
    fn pending() -> Self {
        Self {
            value: None,
            attempts: 0,
            prompt_tokens: 0,
            completion_tokens: 0,
            status: SubtaskStatus::Pending,
        }
    }
}

/// Per-run store of validated intermediate results.
#[derive(Debug, Clone)]
pub struct StateStore {
    entries: BTreeMap<String, StateEntry>,
    root_inputs: BTreeMap<String, String>,
    known_ids: HashSet<String>,
}

impl StateStore {
    pub fn for_pipeline(pipeline: &PipelineSpec) -> Self {
        Self {
            entries: BTreeMap::new(),
            root_inputs: pipeline.root_inputs.clone(),
            known_ids: pipeline
                .subtasks
                .iter()
                .map(|s| s.id.clone())
                .collect(),
        }
    }

    pub fn status(&self, id: &str) -> SubtaskStatus {
        self.entries
            .get(id)
            .map(|e| e.status)
            .unwrap_or(SubtaskStatus::Pending)
    }

    pub fn entry(&self, id: &str) -> Option<&StateEntry> {
        self.entries.get(id)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &StateEntry)> {
        self.entries.iter()
    }

    fn check_known(&self, id: &str) -> Result<(), StateError> {
        if self.known_ids.contains(id) {
            Ok(())
        } else {
            Err(StateError::UnknownSubtask(id.to_string()))
        }
    }

    /// Record a schema-passing output. The caller attests validation; the
    /// engine only calls this with a passing report in hand.
    pub fn write_validated(
        &mut self,
        id: &str,
        value: Value,
        meta: EntryMeta,
    ) -> Result<(), StateError> {
        self.check_known(id)?;
        let current = self.status(id);
        if current != SubtaskStatus::Pending {
            return match current {
                SubtaskStatus::Completed => Err(StateError::AlreadyCompleted(id.to_string())),
                from => Err(StateError::InvalidTransition {
                    id: id.to_string(),
                    from,
                    to: SubtaskStatus::Completed,
                }),
            };
        }
        self.entries.insert(
            id.to_string(),
            StateEntry {
                value: Some(value),
                attempts: meta.attempts.max(1),
                prompt_tokens: meta.prompt_tokens,
                completion_tokens: meta.completion_tokens,
                status: SubtaskStatus::Completed,
            },
        );
        Ok(())
    }

    /// Static-baseline write: the value is stored regardless of validation
    /// outcome, so malformed outputs flow downstream exactly as a fixed
    /// sequential pipeline would pass them. Not used by the rstd strategy.
    pub fn write_ungated(
        &mut self,
        id: &str,
        value: Value,
        meta: EntryMeta,
    ) -> Result<(), StateError> {
        self.write_validated(id, value, meta)
    }

    /// Record a terminal non-completion status.
    pub fn mark(&mut self, id: &str, status: SubtaskStatus) -> Result<(), StateError> {
        self.check_known(id)?;
        if !matches!(status, SubtaskStatus::Failed | SubtaskStatus::Skipped) {
            return Err(StateError::InvalidTransition {
                id: id.to_string(),
                from: self.status(id),
                to: status,
            });
        }
        let from = self.status(id);
        if from != SubtaskStatus::Pending {
            return Err(StateError::InvalidTransition {
                id: id.to_string(),
                from,
                to: status,
            });
        }
        let mut entry = self.entries.remove(id).unwrap_or_else(StateEntry::pending);
        entry.status = status;
        entry.value = None;
        self.entries.insert(id.to_string(), entry);
        Ok(())
    }

    /// Record how many attempts a subtask has consumed so far; kept even
    /// when the subtask ends up failed.
    pub fn note_attempts(&mut self, id: &str, attempts: u32) -> Result<(), StateError> {
        self.check_known(id)?;
        let entry = self
            .entries
            .entry(id.to_string())
            .or_insert_with(StateEntry::pending);
        entry.attempts = attempts;
        Ok(())
    }

    /// Clear a terminal entry so the subtask can be re-executed by a retry
    /// set. The accumulated attempt count is preserved.
    pub fn reset_for_retry(&mut self, id: &str) -> Result<(), StateError> {
        self.check_known(id)?;
        if let Some(entry) = self.entries.get_mut(id) {
            entry.status = SubtaskStatus::Pending;
            entry.value = None;
        }
        Ok(())
    }

    /// Read a completed subtask's value. Failed and skipped outputs are
    /// unreadable by construction.
    pub fn read(&self, id: &str) -> Result<&Value, StateError> {
        match self.entries.get(id) {
            Some(entry) if entry.status == SubtaskStatus::Completed => Ok(entry
                .value
                .as_ref()
                .expect("completed entry carries a value")),
            Some(entry) => Err(StateError::NotCompleted {
                id: id.to_string(),
                status: entry.status,
            }),
            None => Err(StateError::NotCompleted {
                id: id.to_string(),
                status: SubtaskStatus::Pending,
            }),
        }
    }

    /// Assemble exactly the declared inputs of a subtask, serialized for
    /// prompt rendering. Optional inputs from skipped or failed sources are
    /// omitted; nothing else leaks into the map.
    pub fn assemble_context(
        &self,
        subtask: &SubtaskSpec,
    ) -> Result<BTreeMap<String, String>, StateError> {
        let mut context = BTreeMap::new();
        for input in &subtask.input_keys {
            if input.source == ROOT_SOURCE {
                match self.root_inputs.get(&input.key) {
                    Some(text) => {
                        context.insert(input.key.clone(), text.clone());
                    }
                    None if input.required => {
                        return Err(StateError::MissingRequiredInput {
                            consumer: subtask.id.clone(),
                            key: input.key.clone(),
                            producer: ROOT_SOURCE.to_string(),
                            status: SubtaskStatus::Pending,
                        })
                    }
                    None => {}
                }
                continue;
            }
            match self.read(&input.source) {
                Ok(value) => {
                    context.insert(
                        input.key.clone(),
                        serde_json::to_string(value).expect("state values serialize"),
                    );
                }
                Err(StateError::NotCompleted { status, .. }) if !input.required => {
                    let _ = status; // optional input from an unavailable source: omit
                }
                Err(StateError::NotCompleted { status, .. }) => {
                    return Err(StateError::MissingRequiredInput {
                        consumer: subtask.id.clone(),
                        key: input.key.clone(),
                        producer: input.source.clone(),
                        status,
                    })
                }
                Err(other) => return Err(other),
            }
        }
        Ok(context)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{Edge, InputKey, PipelineSpec};
    use serde_json::json;

    fn two_step_pipeline() -> PipelineSpec {
        serde_json::from_value(json!({
            "id": "p",
            "root_inputs": {"task": "ctx"},
            "subtasks": [
                {
                    "id": "S1", "name": "one", "prompt_template": "{task}",
                    "input_keys": [{"key": "task", "source": "root"}],
                    "output_schema": {"kind": "object"}, "model_ref": "default"
                },
                {
                    "id": "S2", "name": "two", "prompt_template": "{prev}",
                    "input_keys": [{"key": "prev", "source": "S1", "required": true}],
                    "output_schema": {"kind": "object"}, "model_ref": "default"
                }
            ],
            "edges": [{"from": "S1", "to": "S2"}]
        }))
        .unwrap()
    }

    fn meta(attempts: u32) -> EntryMeta {
        EntryMeta {
            attempts,
            prompt_tokens: 10,
            completion_tokens: 5,
        }
    }

    #[test]
    fn first_write_completes_second_errors() {
        let pipeline = two_step_pipeline();
        let mut store = StateStore::for_pipeline(&pipeline);
        store.write_validated("S1", json!({"a": 1}), meta(1)).unwrap();
        assert_eq!(store.status("S1"), SubtaskStatus::Completed);
        assert_eq!(
            store.write_validated("S1", json!({}), meta(1)),
            Err(StateError::AlreadyCompleted("S1".to_string()))
        );
    }

    #[test]
    fn unknown_subtask_rejected() {
        let pipeline = two_step_pipeline();
        let mut store = StateStore::for_pipeline(&pipeline);
        assert_eq!(
            store.write_validated("S9", json!({}), meta(1)),
            Err(StateError::UnknownSubtask("S9".to_string()))
        );
    }

    #[test]
    fn repaired_write_records_attempts() {
        let pipeline = two_step_pipeline();
        let mut store = StateStore::for_pipeline(&pipeline);
        store.write_validated("S2", json!({"ok": true}), meta(2)).unwrap();
        assert_eq!(store.entry("S2").unwrap().attempts, 2);
    }

    #[test]
    fn failed_subtask_is_unreadable() {
        let pipeline = two_step_pipeline();
        let mut store = StateStore::for_pipeline(&pipeline);
        store.mark("S1", SubtaskStatus::Failed).unwrap();
        assert!(matches!(
            store.read("S1"),
            Err(StateError::NotCompleted { .. })
        ));
    }

    #[test]
    fn read_unknown_is_not_completed() {
        let pipeline = two_step_pipeline();
        let store = StateStore::for_pipeline(&pipeline);
        assert!(matches!(
            store.read("S1"),
            Err(StateError::NotCompleted { .. })
        ));
    }

    #[test]
    fn mark_on_completed_is_invalid_transition() {
        let pipeline = two_step_pipeline();
        let mut store = StateStore::for_pipeline(&pipeline);
        store.write_validated("S1", json!({}), meta(1)).unwrap();
        assert!(matches!(
            store.mark("S1", SubtaskStatus::Failed),
            Err(StateError::InvalidTransition { .. })
        ));
    }

    #[test]
    fn required_input_from_failed_source_errors() {
        let pipeline = two_step_pipeline();
        let mut store = StateStore::for_pipeline(&pipeline);
        store.mark("S1", SubtaskStatus::Failed).unwrap();
        let err = store.assemble_context(pipeline.subtask("S2").unwrap());
        assert!(matches!(
            err,
            Err(StateError::MissingRequiredInput { ref key, .. }) if key == "prev"
        ));
    }

    #[test]
    fn optional_input_from_skipped_source_omitted() {
        let mut pipeline = two_step_pipeline();
        pipeline.subtasks[1].input_keys = vec![InputKey {
            key: "prev".to_string(),
            source: "S1".to_string(),
            required: false,
        }];
        let mut store = StateStore::for_pipeline(&pipeline);
        store.mark("S1", SubtaskStatus::Skipped).unwrap();
        let ctx = store
            .assemble_context(pipeline.subtask("S2").unwrap())
            .unwrap();
        assert!(ctx.is_empty());
    }

    #[test]
    fn context_contains_exactly_declared_keys() {
        let mut pipeline = two_step_pipeline();
        pipeline.edges.push(Edge {
            from: "S1".to_string(),
            to: "S2".to_string(),
            skip_arc: false,
        });
        let mut store = StateStore::for_pipeline(&pipeline);
        store.write_validated("S1", json!({"x": 1}), meta(1)).unwrap();
        let ctx = store
            .assemble_context(pipeline.subtask("S2").unwrap())
            .unwrap();
        assert_eq!(ctx.keys().collect::<Vec<_>>(), vec!["prev"]);
        assert_eq!(ctx["prev"], r#"{"x":1}"#);
    }
}

//! Deterministic fault injection: reproduce a structural failure (one
//! missing JSON field) at an exact subtask and attempt, exactly once per
//! run.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::path::ValuePath;
use crate::schema::parse_value;

#[derive(Debug, Error)]
pub enum InjectError {
    #[error("injection path `{0}` not found; refusing to run with a misconfigured injection")]
    PathNotFound(String),
    #[error("injection target is not parsable JSON, cannot drop `{0}`")]
    NotJson(String),
    #[error("malformed injection spec: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum InjectionMode {
    /// Remove a field from the target's assembled upstream input. The
    /// path's leading key names the input key; the rest addresses into its
    /// JSON value.
    DropField { path: String },
    /// Remove a field from the target's own raw output before parsing.
    CorruptResponse { path: String },
}

impl InjectionMode {
    pub fn path(&self) -> &str {
        match self {
            InjectionMode::DropField { path } | InjectionMode::CorruptResponse { path } => path,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionSpec {
    pub target_subtask: String,
    #[serde(default = "default_attempt")]
    pub attempt: u32,
    #[serde(flatten)]
    pub mode: InjectionMode,
}

fn default_attempt() -> u32 {
    1
}

impl InjectionSpec {
    /// Parse the CLI form: `target=<id> attempt=<n> mode=<m> path=<p>`.
    pub fn from_key_values(parts: &[String]) -> Result<Self, InjectError> {
        let mut target = None;
        let mut attempt = 1;
        let mut mode_name = None;
        let mut path = None;
        for part in parts {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| InjectError::Malformed(format!("expected key=value, got `{part}`")))?;
            match key {
                "target" => target = Some(value.to_string()),
                "attempt" => {
                    attempt = value
                        .parse()
                        .map_err(|_| InjectError::Malformed(format!("bad attempt `{value}`")))?
                }
                "mode" => mode_name = Some(value.to_string()),
                "path" => path = Some(value.to_string()),
                other => {
                    return Err(InjectError::Malformed(format!("unknown key `{other}`")))
                }
            }
        }
        let target = target.ok_or_else(|| InjectError::Malformed("missing target".into()))?;
        let path = path.ok_or_else(|| InjectError::Malformed("missing path".into()))?;
        ValuePath::parse(&path).map_err(|e| InjectError::Malformed(e.to_string()))?;
        let mode = match mode_name.as_deref() {
            Some("drop_field") => InjectionMode::DropField { path },
            Some("corrupt_response") | None => InjectionMode::CorruptResponse { path },
            Some(other) => {
                return Err(InjectError::Malformed(format!("unknown mode `{other}`")))
            }
        };
        Ok(Self {
            target_subtask: target,
            attempt,
            mode,
        })
    }

    pub fn describe(&self) -> String {
        let mode = match &self.mode {
            InjectionMode::DropField { .. } => "drop_field",
            InjectionMode::CorruptResponse { .. } => "corrupt_response",
        };
        format!(
            "{}@{} {} {}",
            self.target_subtask,
            self.attempt,
            mode,
            self.mode.path()
        )
    }
}

/// True iff the injection fires for this exact (subtask, attempt). Repair
/// attempts see uncorrupted data.
pub fn should_inject(spec: &InjectionSpec, subtask: &str, attempt: u32) -> bool {
    spec.target_subtask == subtask && spec.attempt == attempt
}

/// Remove exactly the addressed field from a JSON value.
pub fn apply_to_value(path_text: &str, value: &mut Value) -> Result<(), InjectError> {
    let path = ValuePath::parse(path_text)
        .map_err(|_| InjectError::PathNotFound(path_text.to_string()))?;
    path.remove(value)
        .map(|_| ())
        .map_err(|_| InjectError::PathNotFound(path_text.to_string()))
}

/// Remove the addressed field from raw model output, re-serializing the
/// mutated value. Everything else is preserved bit-identically at the
/// value level.
pub fn apply_to_raw(path_text: &str, raw: &str) -> Result<String, InjectError> {
    let mut value =
        parse_value(raw).map_err(|_| InjectError::NotJson(path_text.to_string()))?;
    apply_to_value(path_text, &mut value)?;
    Ok(serde_json::to_string(&value).expect("mutated value serializes"))
}

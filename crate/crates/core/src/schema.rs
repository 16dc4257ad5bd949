//! Output contracts for model calls: a small declarative schema language,
//! structural validation with path-addressed error reports, and repair
//! prompt construction.
//!
//! The schema language is deliberately minimal: objects with required
//! fields, arrays with a length floor, strings, bounded numbers, booleans,
//! and string enums. Validation is structural only.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::path::{self, ValuePath};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchemaError {
    #[error("no parsable JSON value in model output")]
    NoParsableValue,
    #[error("repair prompt requested for a passing validation report")]
    PreconditionViolated,
}

/// Declarative output contract for a single model call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchemaNode {
    Object {
        #[serde(default)]
        properties: IndexMap<String, SchemaNode>,
        #[serde(default)]
        required: Vec<String>,
    },
    Array {
        items: Box<SchemaNode>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min_items: Option<usize>,
    },
    String,
    Number {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max: Option<f64>,
    },
    Boolean,
    Enum { values: Vec<String> },
}

impl SchemaNode {
    /// Short name used in error messages.
    pub fn kind_name(&self) -> &'static str {
        match self {
            SchemaNode::Object { .. } => "object",
            SchemaNode::Array { .. } => "array",
            SchemaNode::String => "string",
            SchemaNode::Number { .. } => "number",
            SchemaNode::Boolean => "boolean",
            SchemaNode::Enum { .. } => "enum",
        }
    }

    /// Check the schema's own invariants. Returns the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        match self {
            SchemaNode::Object {
                properties,
                required,
            } => {
                for name in required {
                    if !properties.contains_key(name) {
                        return Err(format!(
                            "required name `{name}` is not a declared property"
                        ));
                    }
                }
                for node in properties.values() {
                    node.check_invariants()?;
                }
                Ok(())
            }
            SchemaNode::Array { items, .. } => items.check_invariants(),
            SchemaNode::Number { min, max } => {
                if let (Some(lo), Some(hi)) = (min, max) {
                    if lo > hi {
                        return Err(format!("number bounds out of order ({lo} > {hi})"));
                    }
                }
                Ok(())
            }
            SchemaNode::Enum { values } => {
                if values.is_empty() {
                    Err("enum value list is empty".to_string())
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// One structural violation, addressed by value path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationError {
    pub path: String,
    pub expected: String,
    pub found: String,
}

/// Outcome of validating one model output against its schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub errors: Vec<ValidationError>,
}

impl ValidationReport {
    pub fn passing() -> Self {
        Self {
            passed: true,
            errors: Vec::new(),
        }
    }

    pub fn from_errors(errors: Vec<ValidationError>) -> Self {
        Self {
            passed: errors.is_empty(),
            errors,
        }
    }

    /// Report for output that could not be parsed at all.
    pub fn unparsable() -> Self {
        Self::from_errors(vec![ValidationError {
            path: "$".to_string(),
            expected: "a parsable JSON value".to_string(),
            found: "no parsable value".to_string(),
        }])
    }
}

fn value_kind(value: &Value) -> &'static str {
    match value {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Extract the first well-formed JSON value embedded in model output,
/// tolerating surrounding prose.
pub fn parse_value(text: &str) -> Result<Value, SchemaError> {
    let trimmed = text.trim();
    if let Ok(v) = serde_json::from_str::<Value>(trimmed) {
        return Ok(v);
    }
    // Try every object/array opener in order and take the first parse.
    for (idx, byte) in text.bytes().enumerate() {
        if byte == b'{' || byte == b'[' {
            let mut stream = serde_json::Deserializer::from_str(&text[idx..]).into_iter::<Value>();
            if let Some(Ok(v)) = stream.next() {
                return Ok(v);
            }
        }
    }
    Err(SchemaError::NoParsableValue)
}

/// Validate a value against a schema. Violations are reported depth-first
/// in declaration order; they are data, not errors.
pub fn validate(value: &Value, schema: &SchemaNode) -> ValidationReport {
    let mut errors = Vec::new();
    validate_at(value, schema, "$", &mut errors);
    ValidationReport::from_errors(errors)
}

fn validate_at(value: &Value, schema: &SchemaNode, at: &str, errors: &mut Vec<ValidationError>) {
    match schema {
        SchemaNode::Object {
            properties,
            required,
        } => {
            let Some(obj) = value.as_object() else {
                errors.push(ValidationError {
                    path: at.to_string(),
                    expected: "object".to_string(),
                    found: value_kind(value).to_string(),
                });
                return;
            };
            for (name, node) in properties {
                match obj.get(name) {
                    Some(child) => validate_at(child, node, &path::child_key(at, name), errors),
                    None if required.contains(name) => errors.push(ValidationError {
                        path: path::child_key(at, name),
                        expected: format!("required {}", node.kind_name()),
                        found: "absent".to_string(),
                    }),
                    None => {}
                }
            }
        }
        SchemaNode::Array { items, min_items } => {
            let Some(arr) = value.as_array() else {
                errors.push(ValidationError {
                    path: at.to_string(),
                    expected: "array".to_string(),
                    found: value_kind(value).to_string(),
                });
                return;
            };
            if let Some(min) = min_items {
                if arr.len() < *min {
                    errors.push(ValidationError {
                        path: at.to_string(),
                        expected: format!("array with at least {min} items"),
                        found: format!("{} items", arr.len()),
                    });
                }
            }
            for (i, item) in arr.iter().enumerate() {
                validate_at(item, items, &path::child_index(at, i), errors);
            }
        }
        SchemaNode::String => {
            if !value.is_string() {
                errors.push(ValidationError {
                    path: at.to_string(),
                    expected: "string".to_string(),
                    found: value_kind(value).to_string(),
                });
            }
        }
        SchemaNode::Number { min, max } => {
            let Some(n) = value.as_f64() else {
                errors.push(ValidationError {
                    path: at.to_string(),
                    expected: "number".to_string(),
                    found: value_kind(value).to_string(),
                });
                return;
            };
            if let Some(lo) = min {
                if n < *lo {
                    errors.push(ValidationError {
                        path: at.to_string(),
                        expected: format!("number >= {lo}"),
                        found: format!("{n}"),
                    });
                }
            }
            if let Some(hi) = max {
                if n > *hi {
                    errors.push(ValidationError {
                        path: at.to_string(),
                        expected: format!("number <= {hi}"),
                        found: format!("{n}"),
                    });
                }
            }
        }
        SchemaNode::Boolean => {
            if !value.is_boolean() {
                errors.push(ValidationError {
                    path: at.to_string(),
                    expected: "boolean".to_string(),
                    found: value_kind(value).to_string(),
                });
            }
        }
        SchemaNode::Enum { values } => match value.as_str() {
            Some(s) if values.iter().any(|v| v == s) => {}
            Some(s) => errors.push(ValidationError {
                path: at.to_string(),
                expected: format!("one of {values:?}"),
                found: format!("\"{s}\""),
            }),
            None => errors.push(ValidationError {
                path: at.to_string(),
                expected: format!("one of {values:?}"),
                found: value_kind(value).to_string(),
            }),
        },
    }
}

const REPAIR_DELIMITER: &str = "\n\n--- VALIDATION ERRORS ---\n";

/// Build the targeted repair prompt for a failed attempt: the original
/// prompt, the serialized violations, and the prior raw output. The result
/// is a pure function of its inputs.
pub fn build_repair_prompt(
    original_prompt: &str,
    raw_output: &str,
    report: &ValidationReport,
) -> Result<String, SchemaError> {
    if report.passed {
        return Err(SchemaError::PreconditionViolated);
    }
    let mut prompt = String::new();
    prompt.push_str(original_prompt);
    prompt.push_str(REPAIR_DELIMITER);
    prompt.push_str("The previous output failed validation:\n");
    for err in &report.errors {
        prompt.push_str(&format!(
            "- at {}: expected {}, found {}\n",
            err.path, err.expected, err.found
        ));
    }
    prompt.push_str("Previous output:\n");
    prompt.push_str(raw_output);
    prompt.push_str("\nCorrect only the listed violations and resend the complete output.\n");
    Ok(prompt)
}

/// Content branching signal: without a confidence path, true iff the value
/// is non-empty; with one, true iff the addressed value is a number at or
/// above the threshold (inclusive).
pub fn check_content_signal(
    value: &Value,
    confidence_path: Option<&ValuePath>,
    threshold: Option<f64>,
) -> bool {
    match confidence_path {
        None => match value {
            Value::Null => false,
            Value::Bool(_) | Value::Number(_) => true,
            Value::String(s) => !s.is_empty(),
            Value::Array(a) => !a.is_empty(),
            Value::Object(o) => !o.is_empty(),
        },
        Some(path) => {
            let threshold = threshold.expect("threshold accompanies confidence path");
            match path.get(value).and_then(Value::as_f64) {
                Some(n) => n >= threshold,
                None => false,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn anomaly_item_schema() -> SchemaNode {
        serde_json::from_value(json!({
            "kind": "array",
            "min_items": 1,
            "items": {
                "kind": "object",
                "properties": {
                    "anomaly": {"kind": "string"},
                    "type": {"kind": "string"},
                    "severity": {"kind": "string"},
                    "confidence": {"kind": "number", "min": 0.0, "max": 1.0}
                },
                "required": ["anomaly", "type", "severity", "confidence"]
            }
        }))
        .unwrap()
    }

    #[test]
    fn parse_value_plain_list() {
        let v = parse_value(
            r#"[{"anomaly":"oom","type":"memory","severity":"high","confidence":0.9}]"#,
        )
        .unwrap();
        assert_eq!(v.as_array().unwrap().len(), 1);
    }

    #[test]
    fn parse_value_prose_wrapped() {
        let v = parse_value(r#"Here is the result: {"a":1}"#).unwrap();
        assert_eq!(v, json!({"a": 1}));
    }

    #[test]
    fn parse_value_no_json() {
        assert_eq!(parse_value("no json here"), Err(SchemaError::NoParsableValue));
    }

    #[test]
    fn missing_confidence_reported_with_path() {
        let value = json!([{"anomaly":"oom","type":"memory","severity":"high"}]);
        let report = validate(&value, &anomaly_item_schema());
        assert!(!report.passed);
        assert_eq!(
            report.errors,
            vec![ValidationError {
                path: "$[0].confidence".to_string(),
                expected: "required number".to_string(),
                found: "absent".to_string(),
            }]
        );
    }

    #[test]
    fn empty_object_passes_schema_without_required() {
        let schema: SchemaNode = serde_json::from_value(json!({"kind": "object"})).unwrap();
        assert!(validate(&json!({}), &schema).passed);
    }

    #[test]
    fn number_bounds_checked() {
        let schema: SchemaNode =
            serde_json::from_value(json!({"kind": "number", "min": 0.0, "max": 1.0})).unwrap();
        assert!(validate(&json!(0.5), &schema).passed);
        assert!(!validate(&json!(1.5), &schema).passed);
    }

    #[test]
    fn enum_membership() {
        let schema: SchemaNode =
            serde_json::from_value(json!({"kind": "enum", "values": ["low", "high"]})).unwrap();
        assert!(validate(&json!("low"), &schema).passed);
        assert!(!validate(&json!("medium"), &schema).passed);
        assert!(!validate(&json!(3), &schema).passed);
    }

    #[test]
    fn repair_prompt_contains_error_paths() {
        let value = json!([{"anomaly":"oom","type":"memory","severity":"high"}]);
        let report = validate(&value, &anomaly_item_schema());
        let prompt = build_repair_prompt("Classify anomalies.", "raw output", &report).unwrap();
        assert!(prompt.contains("$[0].confidence"));
        assert!(prompt.starts_with("Classify anomalies."));
        assert!(prompt.contains("raw output"));
    }

    #[test]
    fn repair_prompt_is_deterministic() {
        let report = ValidationReport::from_errors(vec![ValidationError {
            path: "$.a".to_string(),
            expected: "string".to_string(),
            found: "number".to_string(),
        }]);
        let a = build_repair_prompt("p", "o", &report).unwrap();
        let b = build_repair_prompt("p", "o", &report).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn repair_prompt_rejects_passing_report() {
        assert_eq!(
            build_repair_prompt("p", "o", &ValidationReport::passing()),
            Err(SchemaError::PreconditionViolated)
        );
    }

    #[test]
    fn content_signal_emptiness() {
        assert!(!check_content_signal(&json!([]), None, None));
        assert!(check_content_signal(&json!([1]), None, None));
        assert!(!check_content_signal(&json!(""), None, None));
        assert!(!check_content_signal(&json!(null), None, None));
        assert!(check_content_signal(&json!(0), None, None));
    }

    #[test]
    fn content_signal_confidence_threshold_is_inclusive() {
        let path = ValuePath::parse("$[0].confidence").unwrap();
        let v = json!([{"confidence": 0.9}]);
        assert!(check_content_signal(&v, Some(&path), Some(0.5)));
        let at = json!([{"confidence": 0.5}]);
        assert!(check_content_signal(&at, Some(&path), Some(0.5)));
        let below = json!([{"confidence": 0.49}]);
        assert!(!check_content_signal(&below, Some(&path), Some(0.5)));
        let absent = json!([{}]);
        assert!(!check_content_signal(&absent, Some(&path), Some(0.5)));
        let non_numeric = json!([{"confidence": "high"}]);
        assert!(!check_content_signal(&non_numeric, Some(&path), Some(0.5)));
    }
}

//! The subtask graph: pipeline configuration, invariant checking, and the
//! graph operations the execution strategies are built on.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::SchemaNode;

pub const ROOT_SOURCE: &str = "root";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("malformed pipeline document: {0}")]
    Parse(String),
    #[error("invalid pipeline spec at {path}: {message}")]
    Spec { path: String, message: String },
    #[error("pipeline graph contains a cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("unknown subtask `{0}`")]
    UnknownSubtask(String),
}

fn spec_err(path: impl Into<String>, message: impl Into<String>) -> PipelineError {
    PipelineError::Spec {
        path: path.into(),
        message: message.into(),
    }
}

/// Execution strategy for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Monolithic,
    Static,
    Rstd,
}

impl Strategy {
    pub fn all() -> [Strategy; 3] {
        [Strategy::Monolithic, Strategy::Static, Strategy::Rstd]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Monolithic => "monolithic",
            Strategy::Static => "static",
            Strategy::Rstd => "rstd",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "monolithic" => Ok(Strategy::Monolithic),
            "static" => Ok(Strategy::Static),
            "rstd" => Ok(Strategy::Rstd),
            other => Err(format!(
                "unknown strategy `{other}` (expected monolithic, static, or rstd)"
            )),
        }
    }
}

/// One declared input of a subtask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputKey {
    pub key: String,
    /// Producing subtask id, or `root` for a raw task input.
    pub source: String,
    #[serde(default = "default_true")]
    pub required: bool,
}

fn default_true() -> bool {
    true
}

/// Per-subtask failure handling as written in the config. Missing fields
/// fall back to defaults when resolved.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailurePolicyConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_repair_attempts: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rstd_retry_set: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub static_retry_set: Option<Vec<String>>,
}

/// Fully resolved failure policy for one subtask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FailurePolicy {
    pub max_repair_attempts: u32,
    pub rstd_retry_set: Vec<String>,
    pub static_retry_set: Vec<String>,
}

pub const DEFAULT_MAX_REPAIR_ATTEMPTS: u32 = 3;

/// A single typed model call in the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubtaskSpec {
    pub id: String,
    pub name: String,
    pub prompt_template: String,
    pub input_keys: Vec<InputKey>,
    pub output_schema: SchemaNode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence_threshold: Option<f64>,
    pub model_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_policy: Option<FailurePolicyConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub from: String,
    pub to: String,
    #[serde(default)]
    pub skip_arc: bool,
}

/// Ground-truth check applied to the final output of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckerSpec {
    /// The serialized final output must contain this string.
    pub contains: String,
}

/// The full task DAG plus the raw task context it runs over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    pub id: String,
    #[serde(default)]
    pub root_inputs: BTreeMap<String, String>,
    pub subtasks: Vec<SubtaskSpec>,
    #[serde(default)]
    pub edges: Vec<Edge>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monolithic_prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monolithic_schema: Option<SchemaNode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checker: Option<CheckerSpec>,
}

impl PipelineSpec {
    pub fn subtask(&self, id: &str) -> Result<&SubtaskSpec, PipelineError> {
        self.subtasks
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| PipelineError::UnknownSubtask(id.to_string()))
    }

    pub fn subtask_ids(&self) -> Vec<&str> {
        self.subtasks.iter().map(|s| s.id.as_str()).collect()
    }

    fn declaration_index(&self, id: &str) -> usize {
        self.subtasks
            .iter()
            .position(|s| s.id == id)
            .unwrap_or(usize::MAX)
    }

    /// Non-root edges, the ones that shape execution order.
    fn graph_edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(|e| e.from != ROOT_SOURCE)
    }
}

/// Extract `{key}` placeholders from a prompt template.
pub fn template_placeholders(template: &str) -> BTreeSet<String> {
    let mut keys = BTreeSet::new();
    let bytes = template.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            if let Some(end) = template[i + 1..].find('}') {
                let candidate = &template[i + 1..i + 1 + end];
                if !candidate.is_empty()
                    && candidate
                        .chars()
                        .all(|c| c.is_ascii_alphanumeric() || c == '_')
                {
                    keys.insert(candidate.to_string());
                    i += end + 2;
                    continue;
                }
            }
        }
        i += 1;
    }
    keys
}

/// Substitute `{key}` placeholders from the given context.
pub fn render_template(template: &str, context: &BTreeMap<String, String>) -> String {
    let mut out = template.to_string();
    for (key, value) in context {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

/// Parse a pipeline-config document and check every type invariant.
/// Unknown fields are rejected.
pub fn parse_pipeline(document: &str) -> Result<PipelineSpec, PipelineError> {
    let spec: PipelineSpec =
        serde_json::from_str(document).map_err(|e| PipelineError::Parse(e.to_string()))?;
    validate_pipeline(&spec)?;
    Ok(spec)
}

/// Serialize a pipeline back to its document form. Inverse of
/// `parse_pipeline` up to formatting.
pub fn serialize_pipeline(spec: &PipelineSpec) -> String {
    serde_json::to_string_pretty(spec).expect("pipeline serializes")
}

/// Check all structural invariants of an in-memory pipeline.
pub fn validate_pipeline(spec: &PipelineSpec) -> Result<(), PipelineError> {
    if spec.subtasks.is_empty() {
        return Err(spec_err("subtasks", "pipeline declares no subtasks"));
    }
    let mut ids = HashSet::new();
    for (i, sub) in spec.subtasks.iter().enumerate() {
        if !ids.insert(sub.id.as_str()) {
            return Err(spec_err(
                format!("subtasks[{i}].id"),
                format!("duplicate subtask id `{}`", sub.id),
            ));
        }
        if sub.id == ROOT_SOURCE {
            return Err(spec_err(
                format!("subtasks[{i}].id"),
                "`root` is reserved for raw task inputs",
            ));
        }
    }

    for (i, edge) in spec.edges.iter().enumerate() {
        if edge.from == edge.to {
            return Err(spec_err(
                format!("edges[{i}]"),
                format!("self edge on `{}`", edge.from),
            ));
        }
        if edge.from != ROOT_SOURCE && !ids.contains(edge.from.as_str()) {
            return Err(spec_err(
                format!("edges[{i}].from"),
                format!("unknown subtask `{}`", edge.from),
            ));
        }
        if !ids.contains(edge.to.as_str()) {
            return Err(spec_err(
                format!("edges[{i}].to"),
                format!("unknown subtask `{}`", edge.to),
            ));
        }
    }

    // Acyclicity; reports one concrete cycle on failure.
    topological_order(spec)?;

    for (i, sub) in spec.subtasks.iter().enumerate() {
        let declared: BTreeSet<String> =
            sub.input_keys.iter().map(|k| k.key.clone()).collect();
        for placeholder in template_placeholders(&sub.prompt_template) {
            if !declared.contains(&placeholder) {
                return Err(spec_err(
                    format!("subtasks[{i}].prompt_template"),
                    format!("placeholder `{{{placeholder}}}` has no matching input key"),
                ));
            }
        }
        for (j, input) in sub.input_keys.iter().enumerate() {
            if input.source == ROOT_SOURCE {
                if !spec.root_inputs.contains_key(&input.key) {
                    return Err(spec_err(
                        format!("subtasks[{i}].input_keys[{j}]"),
                        format!("root input `{}` is not declared in root_inputs", input.key),
                    ));
                }
            } else {
                if !ids.contains(input.source.as_str()) {
                    return Err(spec_err(
                        format!("subtasks[{i}].input_keys[{j}].source"),
                        format!("unknown producing subtask `{}`", input.source),
                    ));
                }
                if !spec
                    .graph_edges()
                    .any(|e| e.from == input.source && e.to == sub.id)
                {
                    return Err(spec_err(
                        format!("subtasks[{i}].input_keys[{j}].source"),
                        format!("no edge from `{}` to `{}`", input.source, sub.id),
                    ));
                }
            }
        }
        match (&sub.confidence_path, &sub.confidence_threshold) {
            (Some(_), Some(t)) => {
                if !(0.0..=1.0).contains(t) {
                    return Err(spec_err(
                        format!("subtasks[{i}].confidence_threshold"),
                        format!("threshold {t} is outside [0, 1]"),
                    ));
                }
                if let Some(p) = &sub.confidence_path {
                    crate::path::ValuePath::parse(p).map_err(|e| {
                        spec_err(format!("subtasks[{i}].confidence_path"), e.to_string())
                    })?;
                }
            }
            (None, None) => {}
            _ => {
                return Err(spec_err(
                    format!("subtasks[{i}]"),
                    "confidence_path and confidence_threshold must be given together",
                ))
            }
        }
        sub.output_schema
            .check_invariants()
            .map_err(|m| spec_err(format!("subtasks[{i}].output_schema"), m))?;
        if let Some(policy) = &sub.failure_policy {
            validate_failure_policy(spec, sub, policy, i)?;
        }
    }

    if let Some(schema) = &spec.monolithic_schema {
        schema
            .check_invariants()
            .map_err(|m| spec_err("monolithic_schema", m))?;
    }
    Ok(())
}

fn validate_failure_policy(
    spec: &PipelineSpec,
    sub: &SubtaskSpec,
    policy: &FailurePolicyConfig,
    index: usize,
) -> Result<(), PipelineError> {
    let at = format!("subtasks[{index}].failure_policy");
    if let Some(n) = policy.max_repair_attempts {
        if n < 1 {
            return Err(spec_err(
                format!("{at}.max_repair_attempts"),
                "must be at least 1",
            ));
        }
    }
    let ancestors = ancestor_set(spec, &sub.id)?;
    for (field, set) in [
        ("rstd_retry_set", &policy.rstd_retry_set),
        ("static_retry_set", &policy.static_retry_set),
    ] {
        let Some(members) = set else { continue };
        if members.is_empty() {
            return Err(spec_err(format!("{at}.{field}"), "retry set is empty"));
        }
        for m in members {
            if spec.subtask(m).is_err() {
                return Err(spec_err(
                    format!("{at}.{field}"),
                    format!("unknown subtask `{m}`"),
                ));
            }
        }
        if !members
            .iter()
            .any(|m| m == &sub.id || ancestors.contains(m.as_str()))
        {
            return Err(spec_err(
                format!("{at}.{field}"),
                format!(
                    "retry set must contain `{}` or one of its ancestors",
                    sub.id
                ),
            ));
        }
    }
    Ok(())
}

/// Deterministic topological order: edge sources precede targets, ties
/// broken by declaration order.
pub fn topological_order(spec: &PipelineSpec) -> Result<Vec<String>, PipelineError> {
    let mut in_degree: BTreeMap<&str, usize> =
        spec.subtasks.iter().map(|s| (s.id.as_str(), 0)).collect();
    let mut successors: HashMap<&str, Vec<&str>> = HashMap::new();
    for edge in spec.graph_edges() {
        successors
            .entry(edge.from.as_str())
            .or_default()
            .push(edge.to.as_str());
        if let Some(d) = in_degree.get_mut(edge.to.as_str()) {
            *d += 1;
        }
    }

    let mut order = Vec::with_capacity(spec.subtasks.len());
    let mut remaining: Vec<&str> = spec.subtasks.iter().map(|s| s.id.as_str()).collect();
    while !remaining.is_empty() {
        // First ready node in declaration order.
        let Some(pos) = remaining
            .iter()
            .position(|id| in_degree[id] == 0)
        else {
            return Err(PipelineError::Cycle(find_cycle(spec, &remaining)));
        };
        let id = remaining.remove(pos);
        order.push(id.to_string());
        if let Some(next) = successors.get(id) {
            for succ in next {
                if let Some(d) = in_degree.get_mut(succ) {
                    *d -= 1;
                }
            }
        }
    }
    Ok(order)
}

/// Walk successor links until a node repeats, returning the cycle.
fn find_cycle(spec: &PipelineSpec, candidates: &[&str]) -> Vec<String> {
    let mut successors: HashMap<&str, Vec<&str>> = HashMap::new();
    for edge in spec.graph_edges() {
        successors
            .entry(edge.from.as_str())
            .or_default()
            .push(edge.to.as_str());
    }
    let in_candidates: HashSet<&str> = candidates.iter().copied().collect();
    let start = candidates[0];
    let mut seen: Vec<&str> = vec![start];
    let mut cur = start;
    loop {
        let next = successors
            .get(cur)
            .and_then(|s| s.iter().find(|n| in_candidates.contains(**n)))
            .copied()
            .expect("every candidate in a cycle has a candidate successor");
        if let Some(pos) = seen.iter().position(|&n| n == next) {
            return seen[pos..].iter().map(|s| s.to_string()).collect();
        }
        seen.push(next);
        cur = next;
    }
}

/// All subtasks reachable from `id` via edges, excluding `id` itself.
pub fn downstream_closure(
    spec: &PipelineSpec,
    id: &str,
) -> Result<BTreeSet<String>, PipelineError> {
    spec.subtask(id)?;
    let mut closure = BTreeSet::new();
    let mut frontier = vec![id.to_string()];
    while let Some(cur) = frontier.pop() {
        for edge in spec.graph_edges() {
            if edge.from == cur && edge.to != id && closure.insert(edge.to.clone()) {
                frontier.push(edge.to.clone());
            }
        }
    }
    Ok(closure)
}

/// All subtasks from which `id` is reachable.
pub fn ancestor_set(spec: &PipelineSpec, id: &str) -> Result<BTreeSet<String>, PipelineError> {
    spec.subtask(id)?;
    let mut ancestors = BTreeSet::new();
    let mut frontier = vec![id.to_string()];
    while let Some(cur) = frontier.pop() {
        for edge in spec.graph_edges() {
            if edge.to == cur && edge.from != id && ancestors.insert(edge.from.clone()) {
                frontier.push(edge.from.clone());
            }
        }
    }
    Ok(ancestors)
}

/// Resolve the failure policy for a subtask, filling in defaults: the
/// subtask alone for selective retry, the subtask plus its downstream
/// closure for the static cascade.
pub fn resolve_failure_policy(
    spec: &PipelineSpec,
    id: &str,
) -> Result<FailurePolicy, PipelineError> {
    let sub = spec.subtask(id)?;
    let configured = sub.failure_policy.clone().unwrap_or_default();
    let rstd_retry_set = configured
        .rstd_retry_set
        .unwrap_or_else(|| vec![id.to_string()]);
    let static_retry_set = match configured.static_retry_set {
        Some(set) => set,
        None => {
            let mut set = vec![id.to_string()];
            let closure = downstream_closure(spec, id)?;
            // Closure in topological order keeps rerun order well-defined.
            for node in topological_order(spec)? {
                if closure.contains(&node) {
                    set.push(node);
                }
            }
            set
        }
    };
    Ok(FailurePolicy {
        max_repair_attempts: configured
            .max_repair_attempts
            .unwrap_or(DEFAULT_MAX_REPAIR_ATTEMPTS),
        rstd_retry_set,
        static_retry_set,
    })
}

/// The subtask that gets bypassed when `id` produces a low-content result:
/// a direct successor that a skip arc from `id` routes around. Declaration
/// order breaks ties.
pub fn skip_target(spec: &PipelineSpec, id: &str) -> Result<Option<String>, PipelineError> {
    spec.subtask(id)?;
    let skip_destinations: Vec<&str> = spec
        .graph_edges()
        .filter(|e| e.from == id && e.skip_arc)
        .map(|e| e.to.as_str())
        .collect();
    if skip_destinations.is_empty() {
        return Ok(None);
    }
    let mut candidates: Vec<&str> = Vec::new();
    for edge in spec.graph_edges() {
        if edge.from == id && !edge.skip_arc {
            let bypassed = edge.to.as_str();
            let reachable = downstream_closure(spec, bypassed)?;
            if skip_destinations
                .iter()
                .any(|dest| reachable.contains(*dest))
            {
                candidates.push(bypassed);
            }
        }
    }
    candidates.sort_by_key(|c| spec.declaration_index(c));
    Ok(candidates.first().map(|c| c.to_string()))
}

use serde_json::{Map, Value};
use thiserror::Error;

use crate::prompts::VariantMode;
use crate::tree::Plan;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{reason} (response: {raw:?})")]
pub struct ParseError {
    pub reason: String,
    pub raw: String,
}

fn fail(raw: &str, reason: impl Into<String>) -> ParseError {
    ParseError {
        reason: reason.into(),
        raw: raw.to_string(),
    }
}

/// First complete JSON object in `raw`, skipping prose and code fences.
fn first_object(raw: &str) -> Option<Map<String, Value>> {
    raw.match_indices('{').find_map(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => Some(map),
            _ => None,
        }
    })
}

/// Extracts a [`Plan`] from a model response.
///
/// The object may only carry `think` and `subtasks`. Both are required except
/// under `no_think`, where `think` is optional and always discarded.
pub fn parse_plan(raw: &str, mode: VariantMode) -> Result<Plan, ParseError> {
    let obj = first_object(raw).ok_or_else(|| fail(raw, "no JSON object found"))?;

    if let Some(extra) = obj.keys().find(|k| *k != "think" && *k != "subtasks") {
        return Err(fail(raw, format!("unexpected field {extra:?}")));
    }

    let think = match (obj.get("think"), mode) {
        (Some(Value::String(_)), VariantMode::NoThink) => String::new(),
        (Some(Value::String(t)), _) => t.clone(),
        (Some(_), _) => return Err(fail(raw, "\"think\" must be a string")),
        (None, VariantMode::NoThink) => String::new(),
        (None, _) => return Err(fail(raw, "missing required field \"think\"")),
    };

    let items = match obj.get("subtasks") {
        Some(Value::Array(items)) => items,
        Some(_) => return Err(fail(raw, "\"subtasks\" must be an array")),
        None => return Err(fail(raw, "missing required field \"subtasks\"")),
    };
    let mut subtasks = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        match item {
            Value::String(s) if !s.trim().is_empty() => subtasks.push(s.clone()),
            Value::String(_) => return Err(fail(raw, format!("subtask {i} is blank"))),
            _ => return Err(fail(raw, format!("subtask {i} is not a string"))),
        }
    }
    Ok(Plan { think, subtasks })
}

/// Serializes a plan the way a well-behaved model would answer.
pub fn plan_to_json(plan: &Plan) -> String {
    serde_json::json!({ "think": plan.think, "subtasks": plan.subtasks }).to_string()
}

//! Pulling JSON out of model text and checking it against the output shapes.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::LlmError;
use crate::testcase::Action;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaId {
    Requirements,
    Rule,
    Strategies,
    Actions,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequirementOut {
    pub message_type: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleOut {
    pub role: String,
    pub content: String,
    #[serde(default)]
    pub inferred: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleOut {
    pub field: String,
    pub construction: RoleOut,
    pub processing: RoleOut,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyOut {
    pub field: String,
    pub description: String,
    pub expected_feedback: String,
}

/// First JSON object or array embedded in `raw`, skipping fences and prose.
pub fn extract_json(raw: &str) -> Option<Value> {
    for (i, c) in raw.char_indices() {
        if c != '{' && c != '[' {
            continue;
        }
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        if let Some(Ok(v)) = stream.next() {
            return Some(v);
        }
    }
    None
}

fn typed<T: DeserializeOwned>(v: &Value) -> Result<T, LlmError> {
    serde_json::from_value(v.clone()).map_err(|e| LlmError::SchemaViolation(e.to_string()))
}

fn nonempty(label: &str, s: &str) -> Result<(), LlmError> {
    if s.trim().is_empty() {
        return Err(LlmError::SchemaViolation(format!("{label} is empty")));
    }
    Ok(())
}

/// Extract and validate. The result depends on `raw` alone.
pub fn parse_structured(raw: &str, schema: SchemaId) -> Result<Value, LlmError> {
    let v = extract_json(raw)
        .ok_or_else(|| LlmError::SchemaViolation("no JSON object or array in response".into()))?;
    match schema {
        SchemaId::Requirements => {
            for r in typed::<Vec<RequirementOut>>(&v)? {
                nonempty("message_type", &r.message_type)?;
                nonempty("content", &r.content)?;
            }
        }
        SchemaId::Rule => {
            let r: RuleOut = typed(&v)?;
            nonempty("field", &r.field)?;
            nonempty("construction.content", &r.construction.content)?;
            nonempty("processing.content", &r.processing.content)?;
        }
        SchemaId::Strategies => {
            let list: Vec<StrategyOut> = typed(&v)?;
            if list.is_empty() {
                return Err(LlmError::SchemaViolation("strategy list is empty".into()));
            }
            for s in list {
                nonempty("description", &s.description)?;
                nonempty("expected_feedback", &s.expected_feedback)?;
            }
        }
        SchemaId::Actions => {
            let list: Vec<Action> = typed(&v)?;
            if list.is_empty() {
                return Err(LlmError::SchemaViolation("action sequence is empty".into()));
            }
        }
    }
    Ok(v)
}

/// Parse and convert in one step.
pub fn parse_as<T: DeserializeOwned>(raw: &str, schema: SchemaId) -> Result<T, LlmError> {
    typed(&parse_structured(raw, schema)?)
}

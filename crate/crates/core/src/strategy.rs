//! Mutation strategies: rule violations paired with an expected response class.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::llm::{Gateway, LlmError, SchemaId, StrategyOut, TemplateId};
use crate::message::ProtocolId;
use crate::path::FieldPath;
use crate::rules::SemanticRule;

pub const DEFAULT_STRATEGY_CAP: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeedbackClass {
    Normal,
    Error,
}

impl fmt::Display for FeedbackClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeedbackClass::Normal => "Normal",
            FeedbackClass::Error => "Error",
        })
    }
}

const ERROR_PHRASES: [&str; 24] = [
    "error",
    "error feedback",
    "error response",
    "no response",
    "alert",
    "reject",
    "rejected",
    "rejection",
    "abort",
    "aborted",
    "handshake failure",
    "connection closed",
    "connection reset",
    "timeout",
    "400",
    "400 bad request",
    "bad request",
    "4xx",
    "5xx",
    "500",
    "formerr",
    "servfail",
    "refused",
    "nxdomain",
];

const NORMAL_PHRASES: [&str; 15] = [
    "normal",
    "normal feedback",
    "normal response",
    "handshake proceeds",
    "handshake continues",
    "proceed with the handshake",
    "serverhello",
    "200",
    "200 ok",
    "2xx",
    "success",
    "accepted",
    "accept",
    "ignored",
    "noerror",
];

/// Collapse a free-text expectation into the two response classes.
pub fn map_feedback(phrase: &str) -> Option<FeedbackClass> {
    let norm = phrase
        .trim()
        .trim_matches(|c: char| c == '"' || c == '.' || c == '\'')
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_ascii_lowercase();
    if ERROR_PHRASES.contains(&norm.as_str()) || norm.starts_with("error") {
        return Some(FeedbackClass::Error);
    }
    if NORMAL_PHRASES.contains(&norm.as_str()) || norm.starts_with("normal") {
        return Some(FeedbackClass::Normal);
    }
    None
}

/// Per-protocol wording of the two classes, injected into the strategy prompt.
pub fn expected_response_list(p: ProtocolId) -> Value {
    let (normal, error) = match p {
        ProtocolId::Tls13 => (
            "The server accepted the ClientHello message and proceeded with the handshake (ServerHello).",
            "The server rejected the ClientHello with an Alert or did not respond.",
        ),
        ProtocolId::Http1 => (
            "The server accepted the request and answered with a success status such as 200 OK.",
            "The server answered with a failure status such as 400 or 500, or did not respond.",
        ),
        ProtocolId::Dns => (
            "The resolver answered with data for exactly the queried name.",
            "The response carried unrelated records or an error RCODE, or there was no response.",
        ),
        ProtocolId::Ipv6 => (
            "The receiver replied with an ICMPv6 Echo Reply.",
            "The receiver returned an ICMPv6 error such as Time Exceeded or Parameter Problem, or did not respond.",
        ),
    };
    json!({"Normal feedback": normal, "Error feedback": error})
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationStrategy {
    pub id: String,
    pub rule_id: String,
    pub protocol: ProtocolId,
    pub message_type: String,
    pub field: String,
    pub description: String,
    pub expected: FeedbackClass,
}

/// Field names of `f`, used to check that a description talks about it.
fn field_words(field: &str) -> Vec<String> {
    match FieldPath::parse(field) {
        Ok(p) => p
            .segments()
            .iter()
            .map(|s| s.name.to_ascii_lowercase())
            .collect(),
        Err(_) => vec![field.to_ascii_lowercase()],
    }
}

pub fn mentions_field(description: &str, field: &str) -> bool {
    let d = description.to_ascii_lowercase();
    let d_spaced = d.replace(['_', '-'], " ");
    field_words(field)
        .iter()
        .any(|w| d.contains(w.as_str()) || d_spaced.contains(&w.replace(['_', '-'], " ")))
}

fn check(rule: &SemanticRule) -> impl Fn(&Vec<StrategyOut>) -> Result<(), String> + '_ {
    move |list| {
        for s in list {
            if map_feedback(&s.expected_feedback).is_none() {
                return Err(format!(
                    "expected_feedback {:?} is neither Normal nor Error feedback",
                    s.expected_feedback
                ));
            }
            if !mentions_field(&s.description, &rule.field) {
                return Err(format!(
                    "description {:?} does not mention field {}",
                    s.description, rule.field
                ));
            }
        }
        Ok(())
    }
}

pub fn rule_prompt_json(rule: &SemanticRule) -> Value {
    json!({
        "protocol": rule.protocol,
        "message_type": rule.message_type,
        "field": rule.field,
        "construction": rule.construction,
        "processing": rule.processing,
    })
}

pub fn gen_strategies(
    gw: &Gateway,
    rule: &SemanticRule,
    cap: usize,
) -> Result<Vec<MutationStrategy>, LlmError> {
    let vars: BTreeMap<String, Value> = [
        ("semantic_rule".to_string(), rule_prompt_json(rule)),
        (
            "expected_response_list".to_string(),
            expected_response_list(rule.protocol),
        ),
    ]
    .into();
    let list: Vec<StrategyOut> = gw.ask_with(
        TemplateId::StrategyGen,
        vars,
        SchemaId::Strategies,
        check(rule),
    )?;
    if list.len() > cap {
        log::warn!(
            "{}: {} strategies, keeping the first {cap}",
            rule.id,
            list.len()
        );
    }
    Ok(list
        .into_iter()
        .take(cap)
        .enumerate()
        .map(|(i, s)| {
            if s.field != rule.field {
                log::warn!(
                    "{}: strategy field {:?} replaced by the rule's {:?}",
                    rule.id,
                    s.field,
                    rule.field
                );
            }
            MutationStrategy {
                id: format!("{}-S{}", rule.id, i + 1),
                rule_id: rule.id.clone(),
                protocol: rule.protocol,
                message_type: rule.message_type.clone(),
                field: rule.field.clone(),
                description: s.description.trim().to_string(),
                expected: map_feedback(&s.expected_feedback).expect("checked"),
            }
        })
        .collect())
}

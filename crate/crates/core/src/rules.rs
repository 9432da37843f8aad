//! Structured rule construction from RFC text.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::ingest::{select_seed, MessageTypeList, SeedCorpus};
use crate::llm::{
    par_map, Gateway, LlmError, RequirementOut, RoleOut, RuleOut, SchemaId, TemplateId,
};
use crate::message::{FieldValue, Message, ProtocolId};
use crate::path::{FieldPath, Segment};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuleError {
    #[error("document structure not found: {0}")]
    StructureNotFound(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfcParagraph {
    pub chapter_path: Vec<String>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub rfc: String,
    pub chapter_path: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecificationRequirement {
    pub protocol: ProtocolId,
    pub message_type: String,
    pub content: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Client,
    Server,
}

impl Role {
    pub fn parse(s: &str) -> Option<Role> {
        match s.trim().to_ascii_lowercase().as_str() {
            "client" => Some(Role::Client),
            "server" => Some(Role::Server),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleRule {
    pub role: Role,
    pub content: String,
    /// The model supplied this side; the source text did not state it.
    #[serde(default)]
    pub inferred: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticRule {
    pub id: String,
    pub protocol: ProtocolId,
    pub message_type: String,
    pub field: String,
    pub construction: RoleRule,
    pub processing: RoleRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<RuleProvenance>,
    /// A seed of this message type exists.
    #[serde(default = "yes")]
    pub testable: bool,
    /// `field` resolves against the seed's paths.
    #[serde(default = "yes")]
    pub field_in_seed: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleProvenance {
    pub rfc: String,
    pub chapter_path: Vec<String>,
    pub requirement: String,
}

impl SemanticRule {
    pub fn validate(&self) -> Result<(), String> {
        if self.field.trim().is_empty() {
            return Err("field is empty".into());
        }
        if self.construction.content.trim().is_empty() || self.processing.content.trim().is_empty()
        {
            return Err("rule content is empty".into());
        }
        if self.construction.role == self.processing.role {
            return Err("construction and processing roles are identical".into());
        }
        Ok(())
    }
}

fn heading_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\d+(\.\d+)*\.?\s+\S").expect("heading regex"))
}

fn references_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^(\d+(\.\d+)*\.?\s+)?((Normative|Informative)\s+)?References\s*$")
            .expect("references regex")
    })
}

fn page_noise_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(\[Page \d+\]\s*$)|(^RFC \d+ {2,}.* {2,}\S.*\d{4}\s*$)").expect("page regex")
    })
}

fn is_toc_line(line: &str) -> bool {
    line.contains(". . .") || line.contains("....")
}

/// Text between the table of contents and the References heading, with
/// page headers, footers and form feeds removed.
pub fn clean_document(text: &str) -> Result<String, RuleError> {
    let lines: Vec<String> = text
        .replace('\u{c}', "")
        .lines()
        .filter(|l| !page_noise_re().is_match(l))
        .map(|l| l.trim_end().to_string())
        .collect();
    let toc = lines
        .iter()
        .position(|l| l.trim().eq_ignore_ascii_case("table of contents"))
        .ok_or_else(|| RuleError::StructureNotFound("no table of contents".into()))?;
    let start = lines[toc + 1..]
        .iter()
        .position(|l| heading_re().is_match(l) && !is_toc_line(l))
        .map(|i| toc + 1 + i)
        .ok_or_else(|| {
            RuleError::StructureNotFound("no section heading after the table of contents".into())
        })?;
    let end = lines[start..]
        .iter()
        .position(|l| references_re().is_match(l))
        .map(|i| start + i)
        .ok_or_else(|| RuleError::StructureNotFound("no References heading".into()))?;
    let mut body = lines[start..end].join("\n");
    let trimmed = body.trim_end().len();
    body.truncate(trimmed);
    Ok(body)
}

/// [`clean_document`], falling back to the whole text with a warning.
pub fn clean_document_lenient(text: &str) -> (String, Option<String>) {
    match clean_document(text) {
        Ok(b) => (b, None),
        Err(e) => {
            log::warn!("{e}; using the full document");
            (text.replace('\u{c}', ""), Some(e.to_string()))
        }
    }
}

fn heading_depth(line: &str) -> usize {
    line.split_whitespace()
        .next()
        .map(|num| num.trim_end_matches('.').split('.').count())
        .unwrap_or(1)
}

fn squash(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Blank-line separated paragraphs, each tagged with the enclosing headings.
pub fn split_paragraphs(body: &str) -> Vec<RfcParagraph> {
    let mut out = Vec::new();
    let mut stack: Vec<(usize, String)> = Vec::new();
    let mut block: Vec<&str> = Vec::new();
    let mut flush = |block: &mut Vec<&str>, stack: &mut Vec<(usize, String)>| {
        let mut lines = block.as_slice();
        while let Some(first) = lines.first() {
            if !heading_re().is_match(first) {
                break;
            }
            let depth = heading_depth(first);
            while stack.last().is_some_and(|(d, _)| *d >= depth) {
                stack.pop();
            }
            stack.push((depth, squash(first)));
            lines = &lines[1..];
        }
        let text = squash(&lines.join(" "));
        if !text.is_empty() {
            out.push(RfcParagraph {
                chapter_path: stack.iter().map(|(_, h)| h.clone()).collect(),
                text,
            });
        }
        block.clear();
    };
    for line in body.lines() {
        if line.trim().is_empty() {
            flush(&mut block, &mut stack);
        } else {
            block.push(line);
        }
    }
    flush(&mut block, &mut stack);
    out
}

fn paragraph_input(para: &RfcParagraph) -> String {
    if para.chapter_path.is_empty() {
        para.text.clone()
    } else {
        format!("{}: {}", para.chapter_path.join(" > "), para.text)
    }
}

pub fn identify_specs(
    gw: &Gateway,
    para: &RfcParagraph,
    types: &MessageTypeList,
    rfc: &str,
) -> Result<Vec<SpecificationRequirement>, RuleError> {
    let vars: BTreeMap<String, Value> = [
        ("text".to_string(), Value::from(paragraph_input(para))),
        ("message_type_list".to_string(), json!(types.names())),
    ]
    .into();
    let found: Vec<RequirementOut> =
        gw.ask(TemplateId::SpecIdentify, vars, SchemaId::Requirements)?;
    let mut out = Vec::new();
    for r in found {
        let Some(protocol) = types.protocol_of(&r.message_type) else {
            log::warn!(
                "dropping requirement for unlisted type {:?}",
                r.message_type
            );
            continue;
        };
        out.push(SpecificationRequirement {
            protocol,
            message_type: r.message_type,
            content: r.content.trim().to_string(),
            provenance: Provenance {
                rfc: rfc.to_string(),
                chapter_path: para.chapter_path.clone(),
            },
        });
    }
    Ok(out)
}

/// Field listing handed to the model: one `path (kind)` line per node.
pub fn message_structure(seed: &Message) -> String {
    let mut out = String::new();
    for (path, node) in seed.walk() {
        let detail = match &node.value {
            FieldValue::Uint { bits, value } => format!("uint{bits} = {value}"),
            FieldValue::Text { text } => format!("text = {text:?}"),
            FieldValue::Bytes { hex } if hex.len() <= 16 => format!("bytes = {}", hex::encode(hex)),
            FieldValue::Bytes { hex } => format!("bytes, {} octets", hex.len()),
            FieldValue::Composite { children } => format!("composite, {} children", children.len()),
            FieldValue::List { items } => format!("list, {} items", items.len()),
        };
        let flag = if node.derived { ", derived" } else { "" };
        out.push_str(&format!("{path} ({detail}{flag})\n"));
    }
    out
}

/// Concrete paths a rule field refers to. A list item is also addressable
/// as `list[i].<item name>`, which is how `[*]` fields name elements.
pub fn resolve_rule_field(seed: &Message, field: &str) -> Vec<FieldPath> {
    let Ok(pattern) = FieldPath::parse(field) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for (path, node) in seed.walk() {
        if pattern.matches(&path, false) {
            out.push(path.clone());
            continue;
        }
        let list_item = matches!(path.last(), Some(Segment { index: Some(_), .. }))
            && seed
                .parent_of(&path)
                .is_ok_and(|p| matches!(p.value, FieldValue::List { .. }));
        if list_item && pattern.matches(&path.child(Segment::named(node.name.clone())), false) {
            out.push(path.clone());
        }
    }
    out
}

fn role_rule(r: &RoleOut) -> Option<RoleRule> {
    Some(RoleRule {
        role: Role::parse(&r.role)?,
        content: r.content.trim().to_string(),
        inferred: r.inferred,
    })
}

fn check_rule(r: &RuleOut) -> Result<(), String> {
    let c = role_rule(&r.construction)
        .ok_or_else(|| format!("unknown role {:?}", r.construction.role))?;
    let p =
        role_rule(&r.processing).ok_or_else(|| format!("unknown role {:?}", r.processing.role))?;
    if c.role == p.role {
        return Err("construction and processing roles are identical".into());
    }
    if FieldPath::parse(&r.field).is_err() {
        return Err(format!("field {:?} is not a path", r.field));
    }
    Ok(())
}

pub fn complete_rule(
    gw: &Gateway,
    req: &SpecificationRequirement,
    seed: Option<&Message>,
) -> Result<SemanticRule, RuleError> {
    let structure = seed
        .map(message_structure)
        .unwrap_or_else(|| "(no seed message available)\n".to_string());
    let vars: BTreeMap<String, Value> = [
        (
            "specification_requirement".to_string(),
            Value::from(
                serde_json::to_string(
                    &json!({"message_type": req.message_type, "content": req.content}),
                )
                .expect("json"),
            ),
        ),
        ("message_structure".to_string(), Value::from(structure)),
    ]
    .into();
    let out: RuleOut = gw.ask_with(TemplateId::RuleComplete, vars, SchemaId::Rule, check_rule)?;
    let field_in_seed = seed.is_some_and(|s| !resolve_rule_field(s, &out.field).is_empty());
    if seed.is_some() && !field_in_seed {
        log::warn!(
            "FieldNotInSeed: {} does not resolve in the {} seed",
            out.field,
            req.message_type
        );
    }
    Ok(SemanticRule {
        id: String::new(),
        protocol: req.protocol,
        message_type: req.message_type.clone(),
        field: out.field.trim().to_string(),
        construction: role_rule(&out.construction).expect("checked"),
        processing: role_rule(&out.processing).expect("checked"),
        provenance: Some(RuleProvenance {
            rfc: req.provenance.rfc.clone(),
            chapter_path: req.provenance.chapter_path.clone(),
            requirement: req.content.clone(),
        }),
        testable: seed.is_some(),
        field_in_seed,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedUnit {
    pub stage: String,
    pub unit: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleBuild {
    pub paragraphs: usize,
    pub requirements: Vec<SpecificationRequirement>,
    pub rules: Vec<SemanticRule>,
    pub skipped: Vec<SkippedUnit>,
}

/// Clean, split, identify and complete one document. Rule ids are assigned
/// by the caller once every document is in.
pub fn build_rules(
    gw: &Gateway,
    doc: &str,
    rfc: &str,
    types: &MessageTypeList,
    corpus: &SeedCorpus,
) -> RuleBuild {
    let (body, _) = clean_document_lenient(doc);
    let paragraphs = split_paragraphs(&body);
    let mut build = RuleBuild {
        paragraphs: paragraphs.len(),
        ..Default::default()
    };
    let identified = par_map(&paragraphs, gw.concurrency, |p| {
        identify_specs(gw, p, types, rfc)
    });
    for (i, r) in identified.into_iter().enumerate() {
        match r {
            Ok(reqs) => build.requirements.extend(reqs),
            Err(e) => build.skipped.push(SkippedUnit {
                stage: "identify".into(),
                unit: format!("{rfc} paragraph {i}"),
                reason: e.to_string(),
            }),
        }
    }
    let completed = par_map(&build.requirements, gw.concurrency, |req| {
        complete_rule(gw, req, select_seed(corpus, &req.message_type).ok())
    });
    for (req, r) in build.requirements.iter().zip(completed) {
        match r {
            Ok(rule) => build.rules.push(rule),
            Err(e) => build.skipped.push(SkippedUnit {
                stage: "complete".into(),
                unit: format!("{rfc} {}: {}", req.message_type, req.content),
                reason: e.to_string(),
            }),
        }
    }
    build
}

pub fn assign_ids(rules: &mut [SemanticRule]) {
    for (i, r) in rules.iter_mut().enumerate() {
        r.id = format!("R{:03}", i + 1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_keeps_body_between_markers() {
        let text = "Header stuff\nTable of Contents\n   1.  Introduction . . . . 2\n   2.  References . . . 5\n\n1. Introduction\n\nX\n\n2. References\n\n[1] foo\n";
        assert_eq!(clean_document(text).unwrap(), "1. Introduction\n\nX");
    }

    #[test]
    fn uppercase_references_heading() {
        let text = "Table of Contents\n\n1. INTRODUCTION\n\nX\n\n7. REFERENCES\n\n[RFC-1034] foo\n";
        assert_eq!(clean_document(text).unwrap(), "1. INTRODUCTION\n\nX");
    }

    #[test]
    fn missing_references_falls_back() {
        let text = "Table of Contents\n\n1. Intro\n\nbody\n";
        assert!(matches!(
            clean_document(text),
            Err(RuleError::StructureNotFound(_))
        ));
        let (body, warn) = clean_document_lenient(text);
        assert_eq!(body, text);
        assert!(warn.is_some());
    }

    #[test]
    fn strips_page_furniture() {
        let text = "Table of Contents\n\n1. Intro\n\nline one\nRescorla                     Standards Track                   [Page 3]\n\u{c}\nRFC 8446                           TLS                       August 2018\nline two\n\n9. References\n";
        let body = clean_document(text).unwrap();
        assert!(!body.contains("Page 3"));
        assert!(!body.contains("August 2018"));
        assert!(body.contains("line one\n\nline two") || body.contains("line one\nline two"));
    }

    #[test]
    fn heading_stack() {
        let paras = split_paragraphs("4. A\n\np1\n\n4.1. B\n\np2");
        assert_eq!(
            paras,
            vec![
                RfcParagraph {
                    chapter_path: vec!["4. A".into()],
                    text: "p1".into()
                },
                RfcParagraph {
                    chapter_path: vec!["4. A".into(), "4.1. B".into()],
                    text: "p2".into()
                },
            ]
        );
        let flat = split_paragraphs("just text\n\nmore");
        assert!(flat.iter().all(|p| p.chapter_path.is_empty()));
        let back = split_paragraphs("4. A\n\n4.1. B\n\n5. C\n\np");
        assert_eq!(back[0].chapter_path, vec!["5. C".to_string()]);
    }

    #[test]
    fn identical_roles_rejected() {
        let r = RuleOut {
            field: "a".into(),
            construction: RoleOut {
                role: "server".into(),
                content: "x".into(),
                inferred: false,
            },
            processing: RoleOut {
                role: "Server".into(),
                content: "y".into(),
                inferred: false,
            },
        };
        assert!(check_rule(&r).is_err());
    }
}

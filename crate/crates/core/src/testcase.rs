//! Action sequences and their deterministic application to seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::codec::{self, CodecError};
use crate::ingest::{select_seed, SeedCorpus};
use crate::llm::{par_map, Gateway, LlmError, SchemaId, TemplateId};
use crate::message::{FieldNode, FieldValue, Message, MessageError, ProtocolId};
use crate::path::FieldPath;
use crate::rules::message_structure;
use crate::strategy::{FeedbackClass, MutationStrategy};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Action {
    Add {
        parent: FieldPath,
        #[serde(default)]
        position: Option<usize>,
        field: FieldNode,
    },
    Remove {
        target: FieldPath,
    },
    Update {
        target: FieldPath,
        /// `None` recomputes a derived field.
        #[serde(default)]
        value: Option<FieldValue>,
        #[serde(default)]
        freeze_derived: bool,
    },
}

impl Action {
    pub fn target(&self) -> &FieldPath {
        match self {
            Action::Add { parent, .. } => parent,
            Action::Remove { target } | Action::Update { target, .. } => target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSequence {
    pub strategy_id: String,
    pub actions: Vec<Action>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ApplyError {
    #[error("action {index}: {source}")]
    Message { index: usize, source: MessageError },
    #[error("action {index}: schema violation: {detail}")]
    SchemaViolation { index: usize, detail: String },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("empty action sequence")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub case_id: String,
    pub strategy_id: String,
    pub rule_id: String,
    pub protocol: ProtocolId,
    pub message_type: String,
    pub expected: FeedbackClass,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub actions: Vec<Action>,
    pub message: Message,
    /// Lowercase hex of the encoded case; absent when invalid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wire: Option<String>,
}

impl TestCase {
    pub fn wire_bytes(&self) -> Option<Vec<u8>> {
        self.wire.as_deref().and_then(|h| hex::decode(h).ok())
    }
}

/// Result of applying a sequence: the repaired message, the frozen paths, and the encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Applied {
    pub message: Message,
    pub frozen: Vec<FieldPath>,
    pub wire: Result<Vec<u8>, ApplyError>,
}

/// Apply `actions` in order, repair derived fields once, then encode.
pub fn apply_actions(seed: &Message, actions: &[Action]) -> Result<Applied, ApplyError> {
    if actions.is_empty() {
        return Err(ApplyError::Empty);
    }
    let mut msg = seed.clone();
    let mut frozen = Vec::new();
    for (index, action) in actions.iter().enumerate() {
        let wrap = |source| ApplyError::Message { index, source };
        msg = match action {
            Action::Add {
                parent,
                position,
                field,
            } => msg
                .insert_at(parent, *position, field.clone())
                .map_err(wrap)?,
            Action::Remove { target } => msg.remove_at(target).map_err(wrap)?,
            Action::Update {
                target,
                value,
                freeze_derived,
            } => {
                let node = msg.get(target).map_err(wrap)?;
                let derived = node.derived;
                let next = match value {
                    Some(v) => msg.update_at(target, v.clone()).map_err(wrap)?,
                    None if derived => msg.clone(),
                    None => {
                        return Err(ApplyError::SchemaViolation {
                            index,
                            detail: format!("empty value for non-derived field {target}"),
                        })
                    }
                };
                if *freeze_derived && derived && value.is_some() {
                    frozen.push(target.clone());
                }
                next
            }
        };
    }
    let repaired = codec::repair_derived_except(&msg, &frozen)?;
    let wire = codec::encode_raw(&repaired)
        .map_err(ApplyError::from)
        .and_then(|w| {
            if w.is_empty() {
                Err(ApplyError::Codec(CodecError::Unencodable {
                    path: String::new(),
                    reason: "message encodes to zero octets".into(),
                }))
            } else {
                Ok(w)
            }
        });
    Ok(Applied {
        message: repaired,
        frozen,
        wire,
    })
}

/// Build a case from a seed and a sequence; failures become `valid = false`.
pub fn make_case(
    case_id: &str,
    strategy: &MutationStrategy,
    seed: &Message,
    actions: Vec<Action>,
) -> TestCase {
    let mut case = TestCase {
        case_id: case_id.to_string(),
        strategy_id: strategy.id.clone(),
        rule_id: strategy.rule_id.clone(),
        protocol: strategy.protocol,
        message_type: strategy.message_type.clone(),
        expected: strategy.expected,
        valid: false,
        error: None,
        actions: actions.clone(),
        message: seed.clone(),
        wire: None,
    };
    match apply_actions(seed, &actions) {
        Ok(applied) => {
            case.message = applied.message;
            match applied.wire {
                Ok(w) => {
                    case.valid = true;
                    case.wire = Some(hex::encode(w));
                }
                Err(e) => case.error = Some(e.to_string()),
            }
        }
        Err(e) => case.error = Some(e.to_string()),
    }
    case
}

fn known_target(seed: &Message, target: &FieldPath) -> bool {
    let listed = seed.field_paths();
    let mut p = Some(target.clone());
    while let Some(cur) = p {
        if cur.is_root()
            || listed
                .iter()
                .any(|l| l == &cur || cur.with_last_index(None) == *l)
        {
            return true;
        }
        p = cur.parent();
    }
    false
}

pub fn strategy_prompt_json(s: &MutationStrategy) -> Value {
    serde_json::json!({
        "protocol": s.protocol,
        "message_type": s.message_type,
        "field": s.field,
        "description": s.description,
        "expected": s.expected,
    })
}

pub fn gen_actions(
    gw: &Gateway,
    strategy: &MutationStrategy,
    seed: &Message,
) -> Result<ActionSequence, LlmError> {
    let vars: BTreeMap<String, Value> = [
        (
            "mutation_strategy".to_string(),
            strategy_prompt_json(strategy),
        ),
        (
            "message_structure".to_string(),
            Value::from(message_structure(seed)),
        ),
    ]
    .into();
    let actions: Vec<Action> = gw.ask(TemplateId::ActionGen, vars, SchemaId::Actions)?;
    for a in &actions {
        if !known_target(seed, a.target()) {
            log::warn!(
                "TargetUnknown: {} in {} does not extend a seed path",
                a.target(),
                strategy.id
            );
        }
    }
    Ok(ActionSequence {
        strategy_id: strategy.id.clone(),
        actions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseBatch {
    pub cases: Vec<TestCase>,
    /// Strategies with no seed of their type.
    pub skipped: Vec<String>,
}

impl CaseBatch {
    pub fn accuracy(&self) -> Option<f64> {
        if self.cases.is_empty() {
            return None;
        }
        Some(self.cases.iter().filter(|c| c.valid).count() as f64 / self.cases.len() as f64)
    }
}

/// One case per strategy, seeded by the first corpus entry of its type.
pub fn gen_cases(gw: &Gateway, strategies: &[MutationStrategy], corpus: &SeedCorpus) -> CaseBatch {
    let results = par_map(strategies, gw.concurrency, |s| {
        let seed = select_seed(corpus, &s.message_type).ok()?;
        Some((seed, gen_actions(gw, s, seed)))
    });
    let mut batch = CaseBatch {
        cases: Vec::new(),
        skipped: Vec::new(),
    };
    for (s, r) in strategies.iter().zip(results) {
        let case_id = format!("{}-T1", s.id);
        match r {
            None => batch.skipped.push(s.id.clone()),
            Some((seed, Ok(seq))) => batch.cases.push(make_case(&case_id, s, seed, seq.actions)),
            Some((seed, Err(e))) => {
                log::warn!("{}: action generation failed: {e}", s.id);
                let mut case = make_case(&case_id, s, seed, Vec::new());
                case.error = Some(format!("action generation failed: {e}"));
                batch.cases.push(case);
            }
        }
    }
    batch
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub strategy_id: String,
    pub rule_id: String,
    pub protocol: ProtocolId,
    pub message_type: String,
    pub expected: FeedbackClass,
    pub valid: bool,
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wire_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub total: usize,
    pub valid: usize,
    pub accuracy: Option<f64>,
    pub skipped_strategies: Vec<String>,
    pub cases: Vec<ManifestEntry>,
}

fn io(path: &Path, e: impl ToString) -> std::io::Error {
    std::io::Error::other(format!("{}: {}", path.display(), e.to_string()))
}

/// Write `<id>.json`, `<id>.bin` per case and `manifest.json`.
pub fn write_cases(
    dir: &Path,
    batch: &CaseBatch,
    config_hash: &str,
) -> std::io::Result<CaseManifest> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut entries = Vec::new();
    for c in &batch.cases {
        let file = format!("{}.json", c.case_id);
        let mut text = serde_json::to_string_pretty(c).map_err(|e| io(dir, e))?;
        text.push('\n');
        fs::write(dir.join(&file), text).map_err(|e| io(&dir.join(&file), e))?;
        let wire_file = match c.wire_bytes() {
            Some(w) => {
                let name = format!("{}.bin", c.case_id);
                fs::write(dir.join(&name), w).map_err(|e| io(&dir.join(&name), e))?;
                Some(name)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            case_id: c.case_id.clone(),
            strategy_id: c.strategy_id.clone(),
            rule_id: c.rule_id.clone(),
            protocol: c.protocol,
            message_type: c.message_type.clone(),
            expected: c.expected,
            valid: c.valid,
            file,
            wire_file,
        });
    }
    let manifest = CaseManifest {
        schema_version: crate::SCHEMA_VERSION,
        config_hash: config_hash.to_string(),
        total: batch.cases.len(),
        valid: batch.cases.iter().filter(|c| c.valid).count(),
        accuracy: batch.accuracy(),
        skipped_strategies: batch.skipped.clone(),
        cases: entries,
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| io(dir, e))?;
    text.push('\n');
    let mpath = dir.join("manifest.json");
    fs::write(&mpath, text).map_err(|e| io(&mpath, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> std::io::Result<CaseManifest> {
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    serde_json::from_str(&text).map_err(|e| io(path, e))
}

/// Load every case listed in `<dir>/manifest.json`, in manifest order.
pub fn read_cases(dir: &Path) -> std::io::Result<Vec<TestCase>> {
    let manifest = read_manifest(&dir.join("manifest.json"))?;
    manifest
        .cases
        .iter()
        .map(|e| {
            let p = dir.join(&e.file);
            let text = fs::read_to_string(&p).map_err(|err| io(&p, err))?;
            serde_json::from_str(&text).map_err(|err| io(&p, err))
        })
        .collect()
}

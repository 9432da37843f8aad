//! Prompt templates with `${name}$` placeholders.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::sync::OnceLock;

use super::LlmError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    SpecIdentify,
    RuleComplete,
    StrategyGen,
    ActionGen,
}

impl TemplateId {
    pub const ALL: [TemplateId; 4] = [
        TemplateId::SpecIdentify,
        TemplateId::RuleComplete,
        TemplateId::StrategyGen,
        TemplateId::ActionGen,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::SpecIdentify => "spec_identify",
            TemplateId::RuleComplete => "rule_complete",
            TemplateId::StrategyGen => "strategy_gen",
            TemplateId::ActionGen => "action_gen",
        }
    }

    pub fn parse(s: &str) -> Result<TemplateId, LlmError> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| LlmError::MissingVariable(format!("template {s}")))
    }

    fn builtin(self) -> &'static str {
        match self {
            TemplateId::SpecIdentify => include_str!("../../templates/spec_identify.tmpl"),
            TemplateId::RuleComplete => include_str!("../../templates/rule_complete.tmpl"),
            TemplateId::StrategyGen => include_str!("../../templates/strategy_gen.tmpl"),
            TemplateId::ActionGen => include_str!("../../templates/action_gen.tmpl"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn placeholder() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}\$").expect("placeholder regex"))
}

/// Built-in templates, optionally shadowed by `<dir>/<id>.tmpl` files.
#[derive(Debug, Clone, Default)]
pub struct TemplateStore {
    override_dir: Option<PathBuf>,
}

impl TemplateStore {
    pub fn builtin() -> Self {
        TemplateStore::default()
    }

    pub fn with_override_dir(dir: impl Into<PathBuf>) -> Self {
        TemplateStore {
            override_dir: Some(dir.into()),
        }
    }

    pub fn source(&self, id: TemplateId) -> Result<String, LlmError> {
        if let Some(dir) = &self.override_dir {
            let p = dir.join(format!("{}.tmpl", id.as_str()));
            if p.exists() {
                return fs::read_to_string(&p)
                    .map_err(|e| LlmError::Io(format!("{}: {e}", p.display())));
            }
        }
        Ok(id.builtin().to_string())
    }

    /// Placeholder names in first-appearance order.
    pub fn placeholders(&self, id: TemplateId) -> Result<Vec<String>, LlmError> {
        let src = self.source(id)?;
        let mut out: Vec<String> = Vec::new();
        for cap in placeholder().captures_iter(&src) {
            if !out.iter().any(|n| n == &cap[1]) {
                out.push(cap[1].to_string());
            }
        }
        Ok(out)
    }

    pub fn render(
        &self,
        id: TemplateId,
        vars: &BTreeMap<String, Value>,
    ) -> Result<String, LlmError> {
        let src = self.source(id)?;
        render_text(&src, vars)
    }
}

/// Substitute every placeholder; strings go in verbatim, other JSON values pretty-printed.
pub fn render_text(src: &str, vars: &BTreeMap<String, Value>) -> Result<String, LlmError> {
    let mut out = String::with_capacity(src.len());
    let mut last = 0;
    for cap in placeholder().captures_iter(src) {
        let whole = cap.get(0).expect("match");
        let name = &cap[1];
        let value = vars
            .get(name)
            .ok_or_else(|| LlmError::MissingVariable(name.to_string()))?;
        out.push_str(&src[last..whole.start()]);
        match value {
            Value::String(s) => out.push_str(s),
            other => {
                out.push_str(&serde_json::to_string_pretty(other).expect("JSON value serializes"))
            }
        }
        last = whole.end();
    }
    out.push_str(&src[last..]);
    Ok(out)
}

pub fn template_path(dir: &Path, id: TemplateId) -> PathBuf {
    dir.join(format!("{}.tmpl", id.as_str()))
}

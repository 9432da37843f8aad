//! LLM access: templates, providers, structured parsing and bounded fan-out.

mod provider;
mod structured;
mod template;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use provider::{
    prompt_key, Call, CannedEntry, CannedProvider, CannedScript, Provider, RecordProvider,
    RemoteProvider, ReplayProvider, StoredExchange,
};
pub use structured::{
    extract_json, parse_as, parse_structured, RequirementOut, RoleOut, RuleOut, SchemaId,
    StrategyOut,
};
pub use template::{render_text, template_path, TemplateId, TemplateStore};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LlmError {
    #[error("missing template variable {0}")]
    MissingVariable(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("no recorded response for prompt {0}")]
    FixtureMiss(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling {
            temperature: 0.5,
            top_p: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub template: TemplateId,
    pub variables: BTreeMap<String, Value>,
    pub sampling: Sampling,
}

impl ChatRequest {
    pub fn new(template: TemplateId) -> Self {
        ChatRequest {
            template,
            variables: BTreeMap::new(),
            sampling: Sampling::default(),
        }
    }

    pub fn var(mut self, name: &str, value: impl Into<Value>) -> Self {
        self.variables.insert(name.to_string(), value.into());
        self
    }
}

const REPROMPT_SUFFIX: &str = "\n\n@Correction: the previous answer was rejected ({detail}). Answer again, following @Format exactly and emitting only the JSON value.";

/// Templates plus a provider; the only path from pipeline code to a model.
#[derive(Clone)]
pub struct Gateway {
    pub templates: TemplateStore,
    provider: Arc<dyn Provider>,
    pub sampling: Sampling,
    pub concurrency: usize,
}

impl Gateway {
    pub fn new(provider: Arc<dyn Provider>) -> Self {
        Gateway {
            templates: TemplateStore::builtin(),
            provider,
            sampling: Sampling::default(),
            concurrency: 4,
        }
    }

    pub fn model(&self) -> &str {
        self.provider.model()
    }

    pub fn render(&self, req: &ChatRequest) -> Result<String, LlmError> {
        self.templates.render(req.template, &req.variables)
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<String, LlmError> {
        let prompt = self.render(req)?;
        self.provider.complete(&Call {
            template: req.template,
            prompt,
            sampling: req.sampling,
        })
    }

    /// Render, complete, parse; on a schema violation re-prompt once with
    /// the violation appended.
    pub fn ask<T: DeserializeOwned>(
        &self,
        template: TemplateId,
        vars: BTreeMap<String, Value>,
        schema: SchemaId,
    ) -> Result<T, LlmError> {
        self.ask_with(template, vars, schema, |_: &T| Ok(()))
    }

    /// [`ask`](Self::ask) with an extra semantic check; its failures also
    /// trigger the single re-prompt.
    pub fn ask_with<T, V>(
        &self,
        template: TemplateId,
        vars: BTreeMap<String, Value>,
        schema: SchemaId,
        check: V,
    ) -> Result<T, LlmError>
    where
        T: DeserializeOwned,
        V: Fn(&T) -> Result<(), String>,
    {
        let parse = |raw: &str| -> Result<T, LlmError> {
            let v: T = parse_as(raw, schema)?;
            check(&v).map_err(LlmError::SchemaViolation)?;
            Ok(v)
        };
        let req = ChatRequest {
            template,
            variables: vars,
            sampling: self.sampling,
        };
        let prompt = self.render(&req)?;
        let mut call = Call {
            template,
            prompt,
            sampling: self.sampling,
        };
        let first = self.provider.complete(&call)?;
        match parse(&first) {
            Err(LlmError::SchemaViolation(detail)) => {
                log::warn!("{template}: schema violation ({detail}); re-prompting once");
                call.prompt
                    .push_str(&REPROMPT_SUFFIX.replace("{detail}", &detail));
                let second = self.provider.complete(&call)?;
                parse(&second)
            }
            other => other,
        }
    }
}

/// Map `f` over `items` with at most `workers` threads; output order follows input order.
pub fn par_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap_or_else(|p| p.into_inner())
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    struct Scripted {
        answers: Vec<&'static str>,
        calls: AtomicUsize,
        prompts: Mutex<Vec<String>>,
    }

    impl Provider for Scripted {
        fn complete(&self, call: &Call) -> Result<String, LlmError> {
            self.prompts.lock().unwrap().push(call.prompt.clone());
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(self.answers[i.min(self.answers.len() - 1)].to_string())
        }
        fn model(&self) -> &str {
            "scripted"
        }
    }

    fn vars() -> BTreeMap<String, Value> {
        [
            ("text".to_string(), Value::from("t")),
            ("message_type_list".to_string(), Value::from("l")),
        ]
        .into()
    }

    #[test]
    fn reprompts_once_on_violation() {
        let p = Arc::new(Scripted {
            answers: vec!["nothing", r#"[{"message_type":"DNS Query","content":"c"}]"#],
            calls: AtomicUsize::new(0),
            prompts: Mutex::new(vec![]),
        });
        let gw = Gateway::new(p.clone());
        let out: Vec<RequirementOut> = gw
            .ask(TemplateId::SpecIdentify, vars(), SchemaId::Requirements)
            .unwrap();
        assert_eq!(out.len(), 1);
        let prompts = p.prompts.lock().unwrap();
        assert_eq!(prompts.len(), 2);
        assert!(prompts[1].contains("@Correction"));
    }

    #[test]
    fn fails_after_second_violation() {
        let p = Arc::new(Scripted {
            answers: vec!["nothing"],
            calls: AtomicUsize::new(0),
            prompts: Mutex::new(vec![]),
        });
        let gw = Gateway::new(p.clone());
        let r: Result<Vec<RequirementOut>, _> =
            gw.ask(TemplateId::SpecIdentify, vars(), SchemaId::Requirements);
        assert!(matches!(r, Err(LlmError::SchemaViolation(_))));
        assert_eq!(p.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn par_map_keeps_order() {
        let items: Vec<u32> = (0..100).collect();
        let out = par_map(&items, 4, |x| x * 2);
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn sampling_defaults() {
        let s = Sampling::default();
        assert_eq!((s.temperature, s.top_p), (0.5, 0.1));
    }
}

//! Completion backends: OpenAI-compatible HTTP, replay store, record wrapper
//! and a scripted provider used to author replay stores.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{LlmError, Sampling, TemplateId};

/// One rendered prompt ready to send.
#[derive(Debug, Clone, PartialEq)]
pub struct Call {
    pub template: TemplateId,
    pub prompt: String,
    pub sampling: Sampling,
}

pub trait Provider: Send + Sync {
    fn complete(&self, call: &Call) -> Result<String, LlmError>;
    fn model(&self) -> &str;
}

/// Replay-store key: lowercase hex SHA-256 of the rendered prompt.
pub fn prompt_key(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredExchange {
    pub prompt: String,
    pub response: String,
    pub model: String,
    pub sampling: Sampling,
}

#[derive(Debug, Clone)]
pub struct RemoteProvider {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff_base: Duration,
}

impl RemoteProvider {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        RemoteProvider {
            base_url: base_url.into(),
            model: model.into(),
            api_key: std::env::var("LLM_API_KEY").ok(),
            timeout: Duration::from_secs(120),
            max_retries: 3,
            backoff_base: Duration::from_millis(500),
        }
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }

    /// Chat-completions request body.
    pub fn request_body(&self, call: &Call) -> Value {
        json!({
            "model": self.model,
            "messages": [{"role": "user", "content": call.prompt}],
            "temperature": call.sampling.temperature,
            "top_p": call.sampling.top_p,
        })
    }

    fn attempt(&self, agent: &ureq::Agent, body: &Value) -> Result<String, (bool, LlmError)> {
        let mut req = agent.post(&self.endpoint());
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::StatusCode(code)) => {
                let retryable = code == 429 || code >= 500;
                return Err((retryable, LlmError::Transport(format!("HTTP {code}"))));
            }
            Err(e) => return Err((true, LlmError::Transport(e.to_string()))),
        };
        let parsed: Value = resp.body_mut().read_json().map_err(|e| {
            (
                false,
                LlmError::Transport(format!("bad response body: {e}")),
            )
        })?;
        parsed
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                (
                    false,
                    LlmError::Transport("response has no choices[0].message.content".into()),
                )
            })
    }
}

impl Provider for RemoteProvider {
    fn complete(&self, call: &Call) -> Result<String, LlmError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let body = self.request_body(call);
        let mut retries = 0;
        loop {
            match self.attempt(&agent, &body) {
                Ok(text) => {
                    if retries > 0 {
                        log::info!("completion succeeded after {retries} retries");
                    }
                    return Ok(text);
                }
                Err((true, e)) if retries < self.max_retries => {
                    let wait = self.backoff_base * 2u32.pow(retries);
                    retries += 1;
                    log::warn!(
                        "retry {retries}/{} after {e}; waiting {wait:?}",
                        self.max_retries
                    );
                    thread::sleep(wait);
                }
                Err((_, e)) => return Err(e),
            }
        }
    }

    fn model(&self) -> &str {
        &self.model
    }
}

/// Serves stored responses keyed by prompt hash.
#[derive(Debug, Clone)]
pub struct ReplayProvider {
    pub dir: PathBuf,
}

impl ReplayProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ReplayProvider { dir: dir.into() }
    }

    pub fn lookup(&self, prompt: &str) -> Result<Option<StoredExchange>, LlmError> {
        let path = self.dir.join(format!("{}.json", prompt_key(prompt)));
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path)
            .map_err(|e| LlmError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| LlmError::Io(format!("{}: {e}", path.display())))
    }
}

impl Provider for ReplayProvider {
    fn complete(&self, call: &Call) -> Result<String, LlmError> {
        match self.lookup(&call.prompt)? {
            Some(x) => Ok(x.response),
            None => Err(LlmError::FixtureMiss(prompt_key(&call.prompt))),
        }
    }

    fn model(&self) -> &str {
        "replay"
    }
}

/// Passes misses to `upstream` and stores what it returns.
pub struct RecordProvider {
    replay: ReplayProvider,
    upstream: Box<dyn Provider>,
    write_lock: Mutex<()>,
}

impl RecordProvider {
    pub fn new(dir: impl Into<PathBuf>, upstream: Box<dyn Provider>) -> Self {
        RecordProvider {
            replay: ReplayProvider::new(dir),
            upstream,
            write_lock: Mutex::new(()),
        }
    }
}

impl Provider for RecordProvider {
    fn complete(&self, call: &Call) -> Result<String, LlmError> {
        if let Some(hit) = self.replay.lookup(&call.prompt)? {
            return Ok(hit.response);
        }
        let response = self.upstream.complete(call)?;
        let exchange = StoredExchange {
            prompt: call.prompt.clone(),
            response: response.clone(),
            model: self.upstream.model().to_string(),
            sampling: call.sampling,
        };
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        fs::create_dir_all(&self.replay.dir).map_err(|e| LlmError::Io(e.to_string()))?;
        let path = self
            .replay
            .dir
            .join(format!("{}.json", prompt_key(&call.prompt)));
        let mut text = serde_json::to_string_pretty(&exchange).expect("exchange serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| LlmError::Io(format!("{}: {e}", path.display())))?;
        Ok(response)
    }

    fn model(&self) -> &str {
        self.upstream.model()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CannedEntry {
    pub template: TemplateId,
    /// Every string must occur in the prompt.
    #[serde(rename = "match")]
    pub match_all: Vec<String>,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CannedScript {
    pub model: String,
    pub entries: Vec<CannedEntry>,
    /// Response per template when nothing matches.
    pub fallback: std::collections::BTreeMap<TemplateId, String>,
}

/// Scripted answers chosen by substring match; first matching entry wins.
#[derive(Debug, Clone)]
pub struct CannedProvider {
    script: CannedScript,
}

impl CannedProvider {
    pub fn new(script: CannedScript) -> Self {
        CannedProvider { script }
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = fs::read_to_string(path)
            .map_err(|e| LlmError::Io(format!("{}: {e}", path.display())))?;
        let script = serde_json::from_str(&text)
            .map_err(|e| LlmError::Io(format!("{}: {e}", path.display())))?;
        Ok(CannedProvider { script })
    }
}

impl Provider for CannedProvider {
    fn complete(&self, call: &Call) -> Result<String, LlmError> {
        self.script
            .entries
            .iter()
            .find(|e| {
                e.template == call.template
                    && e.match_all.iter().all(|m| call.prompt.contains(m.as_str()))
            })
            .map(|e| e.response.clone())
            .or_else(|| self.script.fallback.get(&call.template).cloned())
            .ok_or_else(|| LlmError::FixtureMiss(prompt_key(&call.prompt)))
    }

    fn model(&self) -> &str {
        &self.script.model
    }
}

//! Run configuration: built-in defaults, then a JSON file, then flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use semfuzz_core::llm::{
    CannedProvider, Gateway, Provider, RecordProvider, RemoteProvider, ReplayProvider, Sampling,
    TemplateStore,
};
use semfuzz_core::strategy::DEFAULT_STRATEGY_CAP;
use semfuzz_fixtures::BugId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Remote,
    Replay,
    Record,
    Canned,
}

impl ProviderKind {
    pub fn parse(s: &str) -> Option<ProviderKind> {
        match s {
            "remote" => Some(ProviderKind::Remote),
            "replay" => Some(ProviderKind::Replay),
            "record" => Some(ProviderKind::Record),
            "canned" => Some(ProviderKind::Canned),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub provider: ProviderKind,
    pub base_url: String,
    pub model: String,
    /// Replay store; also the write target of `record`.
    pub replay_dir: PathBuf,
    /// Script for `canned`, and the upstream of `record` when set.
    pub canned: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub temperature: f64,
    pub top_p: f64,
    pub concurrency: usize,
    pub timeout_ms: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        let s = Sampling::default();
        LlmConfig {
            provider: ProviderKind::Replay,
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            replay_dir: PathBuf::from("data/llm/replay"),
            canned: None,
            templates: None,
            temperature: s.temperature,
            top_p: s.top_p,
            concurrency: 4,
            timeout_ms: 120_000,
        }
    }
}

/// A fixed campaign target; the pipeline starts bundled fixtures when none are given.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub protocol: semfuzz_core::message::ProtocolId,
    pub mode: semfuzz_core::campaign::Mode,
    pub host: String,
    pub port: u16,
    #[serde(default)]
    pub listen: Option<std::net::SocketAddr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignSettings {
    pub timeout_ms: u64,
    pub workers: usize,
    pub probe: bool,
    /// Bugs planted in the bundled fixtures.
    pub bugs: Vec<BugId>,
    pub targets: Vec<TargetConfig>,
}

impl Default for CampaignSettings {
    fn default() -> Self {
        CampaignSettings {
            timeout_ms: 2000,
            workers: 8,
            probe: true,
            bugs: Vec::new(),
            targets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub types: PathBuf,
    pub seeds: PathBuf,
    pub rfcs: Vec<PathBuf>,
    pub llm: LlmConfig,
    pub strategy_cap: usize,
    pub jaccard: f64,
    pub campaign: CampaignSettings,
    /// Output directory; not part of the config hash.
    pub out: PathBuf,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            types: PathBuf::from("data/message_types.json"),
            seeds: PathBuf::from("data/seeds"),
            rfcs: Vec::new(),
            llm: LlmConfig::default(),
            strategy_cap: DEFAULT_STRATEGY_CAP,
            jaccard: semfuzz_core::eval::DEFAULT_JACCARD,
            campaign: CampaignSettings::default(),
            out: PathBuf::from("out"),
            base: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with `path`; relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if cfg.base.as_os_str().is_empty() {
            cfg.base = PathBuf::from(".");
        }
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// SHA-256 over the canonical JSON of everything except `out`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("out");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn sampling(&self) -> Sampling {
        Sampling {
            temperature: self.llm.temperature,
            top_p: self.llm.top_p,
        }
    }

    pub fn campaign_timeout(&self) -> Duration {
        Duration::from_millis(self.campaign.timeout_ms)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.llm.temperature) || !(0.0..=1.0).contains(&self.llm.top_p) {
            bail!(
                "sampling out of range: temperature {} top_p {}",
                self.llm.temperature,
                self.llm.top_p
            );
        }
        if self.llm.concurrency == 0 || self.campaign.workers == 0 {
            bail!("concurrency and workers must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.jaccard) {
            bail!("jaccard threshold {} is outside [0, 1]", self.jaccard);
        }
        Ok(())
    }

    fn provider(&self) -> Result<Arc<dyn Provider>> {
        let replay_dir = self.resolve(&self.llm.replay_dir);
        let canned = || -> Result<CannedProvider> {
            let path = self
                .llm
                .canned
                .as_ref()
                .context("llm.canned is required for this provider")?;
            Ok(CannedProvider::load(&self.resolve(path))?)
        };
        let remote = || {
            let mut r = RemoteProvider::new(self.llm.base_url.clone(), self.llm.model.clone());
            r.timeout = Duration::from_millis(self.llm.timeout_ms);
            r
        };
        Ok(match self.llm.provider {
            ProviderKind::Remote => Arc::new(remote()),
            ProviderKind::Replay => Arc::new(ReplayProvider::new(replay_dir)),
            ProviderKind::Canned => Arc::new(canned()?),
            ProviderKind::Record => {
                let upstream: Box<dyn Provider> = match self.llm.canned {
                    Some(_) => Box::new(canned()?),
                    None => Box::new(remote()),
                };
                Arc::new(RecordProvider::new(replay_dir, upstream))
            }
        })
    }

    pub fn gateway(&self) -> Result<Gateway> {
        let mut gw = Gateway::new(self.provider()?);
        gw.sampling = self.sampling();
        gw.concurrency = self.llm.concurrency;
        if let Some(dir) = &self.llm.templates {
            gw.templates = TemplateStore::with_override_dir(self.resolve(dir));
        }
        Ok(gw)
    }
}

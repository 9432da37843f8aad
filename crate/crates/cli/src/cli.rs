//! Argument parsing and subcommand dispatch.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use semfuzz_core::campaign::{self, Mode};
use semfuzz_core::eval;
use semfuzz_core::message::ProtocolId;
use semfuzz_core::testcase;
use semfuzz_fixtures::{serve, BugId, FixtureConfig};

use crate::config::{ProviderKind, RunConfig, TargetConfig};
use crate::stages::{self, StrategiesArtifact};
use crate::targets::{self, CampaignPlan};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FINDINGS: i32 = 10;

#[derive(Debug, Parser)]
#[command(
    name = "semfuzz",
    version,
    about = "RFC-driven semantic fuzzing for DNS, HTTP/1.1 and TLS 1.3"
)]
pub struct Cli {
    /// JSON run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub llm: LlmFlags,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct LlmFlags {
    #[arg(long, global = true, value_parser = ["remote", "replay", "record", "canned"])]
    pub provider: Option<String>,
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true)]
    pub base_url: Option<String>,
    #[arg(long, global = true)]
    pub replay_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub canned: Option<PathBuf>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    #[arg(long, global = true)]
    pub top_p: Option<f64>,
    #[arg(long, global = true)]
    pub concurrency: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract semantic rules from RFC text.
    Rules {
        #[command(subcommand)]
        action: RulesCmd,
    },
    /// Derive mutation strategies from rules.
    Strategies {
        #[command(subcommand)]
        action: StrategiesCmd,
    },
    /// Turn strategies into encoded test cases.
    Cases {
        #[command(subcommand)]
        action: CasesCmd,
    },
    /// Send cases to a target and judge the responses.
    Campaign {
        #[command(subcommand)]
        action: CampaignCmd,
    },
    /// Score extracted rules or generated cases.
    Eval {
        #[command(subcommand)]
        action: EvalCmd,
    },
    /// Run the bundled reference servers.
    Fixtures {
        #[command(subcommand)]
        action: FixturesCmd,
    },
    /// Run every stage in order, writing all artifacts under --out.
    Pipeline {
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        campaign: CampaignFlags,
    },
}

#[derive(Debug, Subcommand)]
pub enum RulesCmd {
    Extract {
        #[arg(long = "rfc")]
        rfcs: Vec<PathBuf>,
        #[arg(long)]
        types: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<PathBuf>,
        #[arg(long, default_value = "rules.json")]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum StrategiesCmd {
    Gen {
        #[arg(long, default_value = "rules.json")]
        rules: PathBuf,
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long, default_value = "strategies.json")]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum CasesCmd {
    Gen {
        #[arg(long, default_value = "strategies.json")]
        strategies: PathBuf,
        #[arg(long)]
        types: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<PathBuf>,
        #[arg(long, default_value = "cases")]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProtocolArg {
    Dns,
    Http,
    Tls,
}

impl ProtocolArg {
    fn id(self) -> ProtocolId {
        match self {
            ProtocolArg::Dns => ProtocolId::Dns,
            ProtocolArg::Http => ProtocolId::Http1,
            ProtocolArg::Tls => ProtocolId::Tls13,
        }
    }
}

#[derive(Debug, Args, Default)]
pub struct CampaignFlags {
    /// Liveness probe before every case after the first.
    #[arg(long, overrides_with = "no_probe")]
    pub probe: bool,
    #[arg(long)]
    pub no_probe: bool,
    /// Bugs planted in bundled fixtures (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub bugs: Vec<String>,
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum CampaignCmd {
    Run {
        #[arg(long, default_value = "cases")]
        cases: PathBuf,
        /// host:port of the system under test; bundled fixtures are used when absent.
        #[arg(long, requires = "protocol")]
        target: Option<String>,
        #[arg(long, value_enum)]
        protocol: Option<ProtocolArg>,
        #[arg(long, value_parser = ["client", "responder", "client-sends-case", "responder-sends-case"])]
        mode: Option<String>,
        /// Local address the target forwards to in responder mode.
        #[arg(long)]
        listen: Option<SocketAddr>,
        #[arg(long)]
        types: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<PathBuf>,
        #[arg(long, default_value = "findings.jsonl")]
        out: PathBuf,
        #[command(flatten)]
        flags: CampaignFlags,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    Rules {
        #[arg(long, default_value = "rules.json")]
        extracted: PathBuf,
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    Cases {
        #[arg(long, default_value = "cases/manifest.json")]
        manifest: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum FixturesCmd {
    Serve {
        #[arg(long, value_enum)]
        protocol: ProtocolArg,
        #[arg(long, value_delimiter = ',')]
        bugs: Vec<String>,
        #[arg(long, default_value_t = 0)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// DNS only: forward cache misses to this resolver-side address.
        #[arg(long)]
        upstream: Option<SocketAddr>,
    },
}

fn parse_bugs(names: &[String]) -> Result<Vec<BugId>> {
    names
        .iter()
        .map(|n| BugId::parse(n.trim()).ok_or_else(|| anyhow!("unknown bug {n:?}")))
        .collect()
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(std::path::absolute(p)?)
}

/// Effective configuration: defaults, then `--config`, then flags.
pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let f = &cli.llm;
    if let Some(p) = &f.provider {
        cfg.llm.provider = ProviderKind::parse(p).ok_or_else(|| anyhow!("unknown provider {p}"))?;
    }
    if let Some(m) = &f.model {
        cfg.llm.model = m.clone();
    }
    if let Some(u) = &f.base_url {
        cfg.llm.base_url = u.clone();
    }
    if let Some(d) = &f.replay_dir {
        cfg.llm.replay_dir = absolute(d)?;
    }
    if let Some(c) = &f.canned {
        cfg.llm.canned = Some(absolute(c)?);
    }
    if let Some(t) = f.temperature {
        cfg.llm.temperature = t;
    }
    if let Some(t) = f.top_p {
        cfg.llm.top_p = t;
    }
    if let Some(c) = f.concurrency {
        cfg.llm.concurrency = c;
    }
    match &cli.command {
        Command::Rules {
            action: RulesCmd::Extract {
                rfcs, types, seeds, ..
            },
        } => {
            if !rfcs.is_empty() {
                cfg.rfcs = rfcs.iter().map(|p| absolute(p)).collect::<Result<_>>()?;
            }
            override_inputs(&mut cfg, types, seeds)?;
        }
        Command::Strategies {
            action: StrategiesCmd::Gen { cap: Some(c), .. },
        } => cfg.strategy_cap = *c,
        Command::Cases {
            action: CasesCmd::Gen { types, seeds, .. },
        } => override_inputs(&mut cfg, types, seeds)?,
        Command::Campaign {
            action:
                CampaignCmd::Run {
                    types,
                    seeds,
                    flags,
                    ..
                },
        } => {
            override_inputs(&mut cfg, types, seeds)?;
            override_campaign(&mut cfg, flags)?;
        }
        Command::Eval {
            action: EvalCmd::Rules {
                threshold: Some(t), ..
            },
        } => cfg.jaccard = *t,
        Command::Pipeline { out, campaign } => {
            if let Some(o) = out {
                cfg.out = absolute(o)?;
            }
            override_campaign(&mut cfg, campaign)?;
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn override_inputs(
    cfg: &mut RunConfig,
    types: &Option<PathBuf>,
    seeds: &Option<PathBuf>,
) -> Result<()> {
    if let Some(t) = types {
        cfg.types = absolute(t)?;
    }
    if let Some(s) = seeds {
        cfg.seeds = absolute(s)?;
    }
    Ok(())
}

fn override_campaign(cfg: &mut RunConfig, f: &CampaignFlags) -> Result<()> {
    if f.probe {
        cfg.campaign.probe = true;
    }
    if f.no_probe {
        cfg.campaign.probe = false;
    }
    if !f.bugs.is_empty() {
        cfg.campaign.bugs = parse_bugs(&f.bugs)?;
    }
    if let Some(t) = f.timeout_ms {
        cfg.campaign.timeout_ms = t;
    }
    if let Some(w) = f.workers {
        cfg.campaign.workers = w;
    }
    Ok(())
}

fn plan(cfg: &RunConfig) -> CampaignPlan {
    CampaignPlan {
        timeout: cfg.campaign_timeout(),
        workers: cfg.campaign.workers,
        probe: cfg.campaign.probe,
        bugs: cfg.campaign.bugs.clone(),
        targets: cfg.campaign.targets.clone(),
    }
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(v)?)?;
    Ok(())
}

/// Run a parsed command line and return the process exit code.
pub fn execute(cli: &Cli) -> Result<i32> {
    let cfg = effective_config(cli)?;
    let hash = cfg.hash();
    log::debug!("config hash {hash}");
    match &cli.command {
        Command::Rules {
            action: RulesCmd::Extract { out, .. },
        } => {
            let (types, corpus) =
                stages::load_inputs(&cfg.resolve(&cfg.types), &cfg.resolve(&cfg.seeds))?;
            let rfcs: Vec<PathBuf> = cfg.rfcs.iter().map(|p| cfg.resolve(p)).collect();
            let art = stages::extract_rules(&cfg.gateway()?, &rfcs, &types, &corpus, &hash)?;
            stages::write_json(out, &art)?;
            print_json(
                &json!({"rules": art.rules.len(), "requirements": art.requirements.len(), "skipped": art.skipped.len()}),
            )?;
            Ok(EXIT_OK)
        }
        Command::Strategies {
            action: StrategiesCmd::Gen { rules, out, .. },
        } => {
            let rules = stages::load_rules(rules)?;
            let art = stages::generate_strategies(&cfg.gateway()?, &rules, cfg.strategy_cap, &hash);
            stages::write_json(out, &art)?;
            print_json(&json!({"strategies": art.strategies.len(), "skipped": art.skipped.len()}))?;
            Ok(EXIT_OK)
        }
        Command::Cases {
            action: CasesCmd::Gen {
                strategies, out, ..
            },
        } => {
            let (_, corpus) =
                stages::load_inputs(&cfg.resolve(&cfg.types), &cfg.resolve(&cfg.seeds))?;
            let art: StrategiesArtifact = stages::read_json(strategies)?;
            let m = stages::generate_cases(&cfg.gateway()?, &art.strategies, &corpus, out, &hash)?;
            print_json(&json!({"total": m.total, "valid": m.valid, "accuracy": m.accuracy}))?;
            Ok(EXIT_OK)
        }
        Command::Campaign {
            action:
                CampaignCmd::Run {
                    cases,
                    target,
                    protocol,
                    mode,
                    listen,
                    out,
                    ..
                },
        } => {
            let all = testcase::read_cases(cases)?;
            let mut plan = plan(&cfg);
            let mut selected = all.clone();
            if let (Some(target), Some(protocol)) = (target, protocol) {
                let (host, port) = target
                    .rsplit_once(':')
                    .ok_or_else(|| anyhow!("--target must be host:port"))?;
                let port: u16 = port
                    .parse()
                    .with_context(|| format!("bad port in {target}"))?;
                let mode = match mode {
                    Some(m) => Mode::parse(m).expect("clap restricts values"),
                    None => Mode::Client,
                };
                plan.targets = vec![TargetConfig {
                    protocol: protocol.id(),
                    mode,
                    host: host.trim_matches(['[', ']']).to_string(),
                    port,
                    listen: *listen,
                }];
                selected.retain(|c| {
                    c.protocol == protocol.id() && Mode::for_message_type(&c.message_type) == mode
                });
                if selected.is_empty() {
                    bail!("no {} {} cases in {}", protocol.id(), mode, cases.display());
                }
            }
            let (_, corpus) =
                stages::load_inputs(&cfg.resolve(&cfg.types), &cfg.resolve(&cfg.seeds))?;
            let report = targets::run_all(&selected, &corpus, &plan)?;
            campaign::write_findings(out, &report, &hash, cfg.campaign.probe)?;
            let counts = report.counts();
            print_json(&serde_json::to_value(counts)?)?;
            Ok(if counts.potential_vulnerabilities > 0 {
                EXIT_FINDINGS
            } else {
                EXIT_OK
            })
        }
        Command::Eval {
            action:
                EvalCmd::Rules {
                    extracted,
                    benchmark,
                    ..
                },
        } => {
            let report = stages::eval_rules(
                &stages::load_rules(extracted)?,
                &stages::load_benchmark(benchmark)?,
                cfg.jaccard,
            );
            print_json(&serde_json::to_value(report)?)?;
            Ok(EXIT_OK)
        }
        Command::Eval {
            action: EvalCmd::Cases { manifest },
        } => {
            let m = testcase::read_manifest(manifest)?;
            let valid: Vec<bool> = m.cases.iter().map(|c| c.valid).collect();
            let accuracy = eval::score_cases(&valid)?;
            print_json(&json!({ "accuracy": accuracy }))?;
            Ok(EXIT_OK)
        }
        Command::Fixtures {
            action:
                FixturesCmd::Serve {
                    protocol,
                    bugs,
                    port,
                    host,
                    upstream,
                },
        } => {
            let mut fc = FixtureConfig::new(protocol.id())
                .with_bugs(parse_bugs(bugs)?)
                .with_port(*port);
            fc.host = host.clone();
            fc.upstream = *upstream;
            let handle = serve(fc)?;
            print_json(
                &json!({"protocol": protocol.id(), "addr": handle.local_addr().to_string(), "bugs": bugs}),
            )?;
            loop {
                std::thread::sleep(Duration::from_secs(3600));
            }
        }
        Command::Pipeline { .. } => pipeline(&cfg, &hash),
    }
}

/// All stages end to end; artifacts land in `cfg.out`.
pub fn pipeline(cfg: &RunConfig, hash: &str) -> Result<i32> {
    let out = cfg.resolve(&cfg.out);
    let gw = cfg.gateway()?;
    let (types, corpus) = stages::load_inputs(&cfg.resolve(&cfg.types), &cfg.resolve(&cfg.seeds))?;
    let rfcs: Vec<PathBuf> = cfg.rfcs.iter().map(|p| cfg.resolve(p)).collect();
    let rules = stages::extract_rules(&gw, &rfcs, &types, &corpus, hash)?;
    stages::write_json(&out.join("rules.json"), &rules)?;
    let strategies = stages::generate_strategies(&gw, &rules.rules, cfg.strategy_cap, hash);
    stages::write_json(&out.join("strategies.json"), &strategies)?;
    let manifest = stages::generate_cases(
        &gw,
        &strategies.strategies,
        &corpus,
        &out.join("cases"),
        hash,
    )?;
    let cases = testcase::read_cases(&out.join("cases"))?;
    let report = targets::run_all(&cases, &corpus, &plan(cfg))?;
    campaign::write_findings(
        &out.join("findings.jsonl"),
        &report,
        hash,
        cfg.campaign.probe,
    )?;
    let counts = report.counts();
    print_json(&json!({
        "config_hash": hash,
        "rules": rules.rules.len(),
        "strategies": strategies.strategies.len(),
        "cases": manifest.total,
        "valid_cases": manifest.valid,
        "campaign": counts,
    }))?;
    Ok(if counts.potential_vulnerabilities > 0 {
        EXIT_FINDINGS
    } else {
        EXIT_OK
    })
}

/// Parse `args`, run, and map every outcome to an exit code. Diagnostics go
/// to stderr as one JSON object per line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", json!({"level": "error", "message": format!("{e:#}")}));
            EXIT_RUNTIME
        }
    }
}

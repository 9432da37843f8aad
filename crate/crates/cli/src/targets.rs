//! Campaign orchestration: groups cases by protocol and sending side, and
//! points each group at a configured target or a bundled fixture.

use std::net::{SocketAddr, UdpSocket};
use std::time::Duration;

use anyhow::{bail, Context, Result};

use semfuzz_core::campaign::{self, CampaignConfig, Endpoint, Mode, Report};
use semfuzz_core::codec;
use semfuzz_core::ingest::{select_seed, SeedCorpus};
use semfuzz_core::message::ProtocolId;
use semfuzz_core::testcase::TestCase;
use semfuzz_fixtures::{serve, BugId, FixtureConfig, FixtureHandle};

use crate::config::TargetConfig;

/// Seed type whose wire doubles as the liveness probe, per protocol.
const PROBE_TYPES: [(ProtocolId, &str); 3] = [
    (ProtocolId::Dns, "DNS Query"),
    (ProtocolId::Http1, "http request with Host header"),
    (
        ProtocolId::Tls13,
        "ClientHello with Supported Versions Extension",
    ),
];

pub struct Group {
    pub protocol: ProtocolId,
    pub mode: Mode,
    pub cases: Vec<TestCase>,
}

/// Cases bucketed by (protocol, mode) in order of first appearance.
pub fn group_cases(cases: &[TestCase]) -> Vec<Group> {
    let mut groups: Vec<Group> = Vec::new();
    for c in cases {
        let mode = Mode::for_message_type(&c.message_type);
        match groups
            .iter_mut()
            .find(|g| g.protocol == c.protocol && g.mode == mode)
        {
            Some(g) => g.cases.push(c.clone()),
            None => groups.push(Group {
                protocol: c.protocol,
                mode,
                cases: vec![c.clone()],
            }),
        }
    }
    groups
}

/// Known-good probe message for a group, if probing applies.
pub fn probe_for(protocol: ProtocolId, mode: Mode, corpus: &SeedCorpus) -> Option<Vec<u8>> {
    if protocol == ProtocolId::Dns && mode == Mode::Responder {
        return Some(campaign::flush_query(0x3fff));
    }
    let (_, ty) = PROBE_TYPES.iter().find(|(p, _)| *p == protocol)?;
    let seed = select_seed(corpus, ty).ok()?;
    codec::encode(seed).ok().map(|w| w.into_vec())
}

/// A free local address for the responder side, released before use.
fn reserve_udp() -> Result<SocketAddr> {
    let sock = UdpSocket::bind("127.0.0.1:0").context("reserving a responder port")?;
    Ok(sock.local_addr()?)
}

/// A running bundled fixture and the endpoint that reaches it.
pub struct BundledTarget {
    pub endpoint: Endpoint,
    pub handle: FixtureHandle,
}

pub fn start_bundled(protocol: ProtocolId, mode: Mode, bugs: &[BugId]) -> Result<BundledTarget> {
    let mut cfg = FixtureConfig::new(protocol)
        .with_bugs(bugs.iter().copied().filter(|b| b.protocol() == protocol));
    let mut listen = None;
    match (protocol, mode) {
        (_, Mode::Client) => {}
        (ProtocolId::Dns, Mode::Responder) => {
            let addr = reserve_udp()?;
            cfg = cfg.with_upstream(addr);
            listen = Some(addr);
        }
        (p, Mode::Responder) => bail!("no bundled fixture consumes {p} responses"),
    }
    let handle = serve(cfg)?;
    let addr = handle.local_addr();
    let mut endpoint = Endpoint::for_protocol(protocol, &addr.ip().to_string(), addr.port(), mode);
    endpoint.listen = listen;
    Ok(BundledTarget { endpoint, handle })
}

pub fn endpoint_for(t: &TargetConfig) -> Endpoint {
    let mut ep = Endpoint::for_protocol(t.protocol, &t.host, t.port, t.mode);
    ep.listen = t.listen;
    ep
}

#[derive(Debug, Clone)]
pub struct CampaignPlan {
    pub timeout: Duration,
    pub workers: usize,
    pub probe: bool,
    pub bugs: Vec<BugId>,
    pub targets: Vec<TargetConfig>,
}

/// Run every group; groups with no reachable target are reported as skipped.
pub fn run_all(cases: &[TestCase], corpus: &SeedCorpus, plan: &CampaignPlan) -> Result<Report> {
    let mut report = Report::default();
    for g in group_cases(cases) {
        let cfg = CampaignConfig {
            timeout: plan.timeout,
            workers: plan.workers,
            probe: if plan.probe {
                probe_for(g.protocol, g.mode, corpus)
            } else {
                None
            },
        };
        let configured = plan
            .targets
            .iter()
            .find(|t| t.protocol == g.protocol && t.mode == g.mode);
        let part = match configured {
            Some(t) => campaign::run_campaign(&g.cases, &endpoint_for(t), &cfg)?,
            None if plan.targets.is_empty() => {
                match start_bundled(g.protocol, g.mode, &plan.bugs) {
                    Ok(mut target) => {
                        let r = campaign::run_campaign(&g.cases, &target.endpoint, &cfg);
                        target.handle.shutdown();
                        r?
                    }
                    Err(e) => {
                        log::warn!("{} {} cases skipped: {e}", g.protocol, g.mode);
                        skipped(&g.cases)
                    }
                }
            }
            None => {
                log::warn!(
                    "no target configured for {} {}; {} cases skipped",
                    g.protocol,
                    g.mode,
                    g.cases.len()
                );
                skipped(&g.cases)
            }
        };
        log::info!("{} {}: {:?}", g.protocol, g.mode, part.counts());
        report.merge(part);
    }
    Ok(report)
}

fn skipped(cases: &[TestCase]) -> Report {
    Report {
        verdicts: Vec::new(),
        skipped: cases.iter().map(|c| c.case_id.clone()).collect(),
    }
}

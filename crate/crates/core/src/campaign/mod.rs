//! Campaign execution: send cases, classify responses, compare with expectations.

pub mod exec;

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, dns, http, tls};
use crate::llm::par_map;
use crate::message::{Message, ProtocolId};
use crate::strategy::FeedbackClass;
use crate::testcase::TestCase;

pub use exec::{dns_query, flush_query, Framing, FLUSH_NAME};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Tcp,
    Udp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "client-sends-case", alias = "client")]
    Client,
    #[serde(rename = "responder-sends-case", alias = "responder")]
    Responder,
}

impl Mode {
    pub fn parse(text: &str) -> Option<Mode> {
        match text {
            "client" | "client-sends-case" => Some(Mode::Client),
            "responder" | "responder-sends-case" => Some(Mode::Responder),
            _ => None,
        }
    }

    /// The side that sends messages of this type.
    pub fn for_message_type(message_type: &str) -> Mode {
        let t = message_type.to_ascii_lowercase();
        if t.contains("response") || t.contains("serverhello") {
            Mode::Responder
        } else {
            Mode::Client
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Client => "client-sends-case",
            Mode::Responder => "responder-sends-case",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
    pub transport: Transport,
    pub mode: Mode,
    pub tls_like: bool,
    /// Local address bound in responder mode.
    #[serde(default)]
    pub listen: Option<SocketAddr>,
}

impl Endpoint {
    pub fn for_protocol(protocol: ProtocolId, host: &str, port: u16, mode: Mode) -> Self {
        Endpoint {
            host: host.to_string(),
            port,
            transport: if protocol == ProtocolId::Dns {
                Transport::Udp
            } else {
                Transport::Tcp
            },
            mode,
            tls_like: protocol == ProtocolId::Tls13,
            listen: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RawOutcome {
    Bytes { octets: Vec<u8>, rtt_ms: u64 },
    Timeout { deadline_ms: u64 },
    ConnectionRefused,
    ConnectionReset,
}

/// Timing-free view of a [`RawOutcome`] for reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeSummary {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub octets: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline_ms: Option<u64>,
}

impl RawOutcome {
    pub fn summary(&self) -> OutcomeSummary {
        let (kind, octets, deadline_ms) = match self {
            RawOutcome::Bytes { octets, .. } => ("bytes", Some(hex::encode(octets)), None),
            RawOutcome::Timeout { deadline_ms } => ("timeout", None, Some(*deadline_ms)),
            RawOutcome::ConnectionRefused => ("connection_refused", None, None),
            RawOutcome::ConnectionReset => ("connection_reset", None, None),
        };
        OutcomeSummary {
            kind: kind.to_string(),
            octets,
            deadline_ms,
        }
    }
}

/// Extra facts the classifier needs beyond the bytes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassifyContext {
    /// DNS name that was asked for.
    pub question: Option<String>,
}

fn norm_name(n: &str) -> String {
    n.trim_end_matches('.').to_ascii_lowercase()
}

fn classify_dns(octets: &[u8], ctx: &ClassifyContext) -> (FeedbackClass, String) {
    let msg = match codec::decode(ProtocolId::Dns, "DNS Response", octets) {
        Ok(m) => m,
        Err(e) => {
            return (
                FeedbackClass::Error,
                format!("unparseable DNS response: {e}"),
            )
        }
    };
    let Some(s) = dns::summarize(&msg.root) else {
        return (FeedbackClass::Error, "unparseable DNS response".into());
    };
    if !s.qr {
        return (FeedbackClass::Error, "reply is not a response".into());
    }
    if s.rcode != 0 {
        return (FeedbackClass::Error, format!("rcode {}", s.rcode));
    }
    let asked = match (&ctx.question, s.questions.first()) {
        (Some(q), _) => norm_name(q),
        (None, Some((q, _, _))) => norm_name(q),
        (None, None) => {
            return (
                FeedbackClass::Error,
                "no question to compare answers against".into(),
            )
        }
    };
    let answers: Vec<&String> = s
        .records
        .iter()
        .filter(|r| r.0 == "answer")
        .map(|r| &r.1)
        .collect();
    if let Some(other) = answers.iter().find(|owner| norm_name(owner) != asked) {
        return (
            FeedbackClass::Error,
            format!("unrelated record {other} in answer for {asked}"),
        );
    }
    (
        FeedbackClass::Normal,
        format!("{} answer(s) for {asked}", answers.len()),
    )
}

fn classify_tls(octets: &[u8]) -> (FeedbackClass, String) {
    match tls::first_record_kind(octets) {
        Some((ct, Some(hs)))
            if u64::from(ct) == tls::CONTENT_HANDSHAKE && u64::from(hs) == tls::HS_SERVER_HELLO =>
        {
            (FeedbackClass::Normal, "ServerHello".into())
        }
        Some((ct, _)) if u64::from(ct) == tls::CONTENT_ALERT => {
            let level = octets.get(5).copied().unwrap_or(0);
            let desc = octets.get(6).copied().unwrap_or(0);
            (
                FeedbackClass::Error,
                format!("Alert level {level} description {desc}"),
            )
        }
        Some((ct, hs)) => (
            FeedbackClass::Error,
            format!("unexpected record type {ct} handshake {hs:?}"),
        ),
        None => (FeedbackClass::Error, "unparseable TLS record".into()),
    }
}

fn classify_http(octets: &[u8]) -> (FeedbackClass, String) {
    match http::status_code(octets) {
        Some(code) if (200..300).contains(&code) => {
            (FeedbackClass::Normal, format!("status {code}"))
        }
        Some(code) => (FeedbackClass::Error, format!("status {code}")),
        None => (FeedbackClass::Error, "unparseable HTTP status line".into()),
    }
}

const ICMPV6: u8 = 58;
const ECHO_REPLY: u8 = 129;

fn classify_ipv6(octets: &[u8]) -> (FeedbackClass, String) {
    if octets.len() >= 41 && octets[0] >> 4 == 6 && octets[6] == ICMPV6 {
        let t = octets[40];
        if t == ECHO_REPLY {
            return (FeedbackClass::Normal, "ICMPv6 Echo Reply".into());
        }
        return (FeedbackClass::Error, format!("ICMPv6 type {t}"));
    }
    (FeedbackClass::Error, "no ICMPv6 reply".into())
}

/// Map an observed outcome to the two response classes.
pub fn classify(
    protocol: ProtocolId,
    outcome: &RawOutcome,
    ctx: &ClassifyContext,
) -> (FeedbackClass, String) {
    let octets = match outcome {
        RawOutcome::Bytes { octets, .. } => octets,
        RawOutcome::Timeout { deadline_ms } => {
            return (
                FeedbackClass::Error,
                format!("no response within {deadline_ms}ms"),
            )
        }
        RawOutcome::ConnectionRefused => {
            return (FeedbackClass::Error, "connection refused".into())
        }
        RawOutcome::ConnectionReset => {
            return (
                FeedbackClass::Error,
                "connection closed without response".into(),
            )
        }
    };
    match protocol {
        ProtocolId::Dns => classify_dns(octets, ctx),
        ProtocolId::Tls13 => classify_tls(octets),
        ProtocolId::Http1 => classify_http(octets),
        ProtocolId::Ipv6 => classify_ipv6(octets),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Consistent,
    PotentialVulnerability,
    /// The target failed a liveness probe earlier in the run.
    Indeterminate,
}

pub fn verify(expected: FeedbackClass, actual: FeedbackClass) -> Status {
    if expected == actual {
        Status::Consistent
    } else {
        Status::PotentialVulnerability
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub case_id: String,
    pub rule_id: String,
    pub strategy_id: String,
    pub protocol: ProtocolId,
    pub message_type: String,
    pub expected: FeedbackClass,
    pub actual_class: FeedbackClass,
    pub status: Status,
    pub raw: OutcomeSummary,
    pub classified_detail: String,
    pub wire: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CampaignConfig {
    pub timeout: Duration,
    pub workers: usize,
    /// Known-good message sent before every case after the first; `None` disables probing.
    pub probe: Option<Vec<u8>>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            timeout: Duration::from_millis(2000),
            workers: 8,
            probe: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub verdicts: Vec<Verdict>,
    /// Invalid cases, by id.
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub executed: usize,
    pub consistent: usize,
    pub potential_vulnerabilities: usize,
    pub indeterminate: usize,
    pub skipped: usize,
}

impl Report {
    pub fn merge(&mut self, other: Report) {
        self.verdicts.extend(other.verdicts);
        self.skipped.extend(other.skipped);
    }

    pub fn counts(&self) -> Counts {
        let by = |s: Status| self.verdicts.iter().filter(|v| v.status == s).count();
        Counts {
            executed: self.verdicts.len(),
            consistent: by(Status::Consistent),
            potential_vulnerabilities: by(Status::PotentialVulnerability),
            indeterminate: by(Status::Indeterminate),
            skipped: self.skipped.len(),
        }
    }

    pub fn potential_vulnerabilities(&self) -> impl Iterator<Item = &Verdict> {
        self.verdicts
            .iter()
            .filter(|v| v.status == Status::PotentialVulnerability)
    }
}

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("cannot bind responder socket: {0}")]
    Bind(std::io::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn dns_question(msg: &Message) -> Option<(String, u16, u16)> {
    let s = dns::summarize(&msg.root)?;
    if let Some(q) = s.questions.first() {
        return Some(q.clone());
    }
    s.records.first().map(|r| (r.1.clone(), r.2, r.3))
}

fn probe_ok(protocol: ProtocolId, ep: &Endpoint, probe: &[u8], timeout: Duration) -> bool {
    let client = Endpoint {
        mode: Mode::Client,
        ..ep.clone()
    };
    let out = exec::send_client(&client, exec::framing_for(ep, protocol), probe, timeout);
    let ctx = if protocol == ProtocolId::Dns {
        ClassifyContext {
            question: codec::decode(protocol, "DNS Query", probe)
                .ok()
                .and_then(|m| dns_question(&m))
                .map(|q| q.0),
        }
    } else {
        ClassifyContext::default()
    };
    classify(protocol, &out, &ctx).0 == FeedbackClass::Normal
}

enum Responder {
    None,
    Udp(std::net::UdpSocket),
    Tcp(std::net::TcpListener),
}

fn execute(
    case: &TestCase,
    index: usize,
    ep: &Endpoint,
    responder: &Responder,
    timeout: Duration,
) -> (RawOutcome, ClassifyContext, Option<String>) {
    let wire = case.wire_bytes().unwrap_or_default();
    let framing = exec::framing_for(ep, case.protocol);
    let case_question = if case.protocol == ProtocolId::Dns {
        dns_question(&case.message)
    } else {
        None
    };
    match responder {
        Responder::Udp(sock) => {
            let Some(q) = case_question else {
                return (
                    RawOutcome::ConnectionReset,
                    ClassifyContext::default(),
                    Some("case has no name to trigger a lookup".into()),
                );
            };
            let id_base = 0x4000u16.wrapping_add((index as u16).wrapping_mul(4));
            let run = exec::dns_responder(ep, sock, (&q.0, q.1, q.2), &wire, id_base, timeout);
            let note = format!(
                "trigger {}, {} forwarded",
                run.trigger.summary().kind,
                run.forwarded
            );
            (
                run.follow_up,
                ClassifyContext {
                    question: Some(q.0),
                },
                Some(note),
            )
        }
        Responder::Tcp(listener) => (
            exec::tcp_responder(listener, framing, &wire, timeout),
            ClassifyContext::default(),
            None,
        ),
        Responder::None => {
            let out = exec::send_client(ep, framing, &wire, timeout);
            (
                out,
                ClassifyContext {
                    question: case_question.map(|q| q.0),
                },
                None,
            )
        }
    }
}

/// Run every valid case against `ep`; invalid cases are listed as skipped.
pub fn run_campaign(
    cases: &[TestCase],
    ep: &Endpoint,
    cfg: &CampaignConfig,
) -> Result<Report, CampaignError> {
    let mut report = Report::default();
    let runnable: Vec<&TestCase> = cases
        .iter()
        .filter(|c| c.valid && c.wire.is_some())
        .collect();
    report.skipped = cases
        .iter()
        .filter(|c| !(c.valid && c.wire.is_some()))
        .map(|c| c.case_id.clone())
        .collect();
    let responder = if exec::is_responder(ep) {
        match (ep.transport, runnable.first().map(|c| c.protocol)) {
            (Transport::Udp, Some(ProtocolId::Dns)) => {
                Responder::Udp(exec::responder_udp(ep).map_err(CampaignError::Bind)?)
            }
            (Transport::Tcp, Some(_)) => {
                Responder::Tcp(exec::responder_tcp(ep).map_err(CampaignError::Bind)?)
            }
            _ => Responder::None,
        }
    } else {
        Responder::None
    };
    let judge = |case: &TestCase,
                 outcome: RawOutcome,
                 ctx: ClassifyContext,
                 note: Option<String>,
                 down: bool| {
        let (actual, mut detail) = classify(case.protocol, &outcome, &ctx);
        if let Some(n) = note {
            detail = format!("{detail} ({n})");
        }
        let status = if down {
            detail = format!("{detail}; target failed liveness probe earlier");
            Status::Indeterminate
        } else {
            verify(case.expected, actual)
        };
        Verdict {
            case_id: case.case_id.clone(),
            rule_id: case.rule_id.clone(),
            strategy_id: case.strategy_id.clone(),
            protocol: case.protocol,
            message_type: case.message_type.clone(),
            expected: case.expected,
            actual_class: actual,
            status,
            raw: outcome.summary(),
            classified_detail: detail,
            wire: case.wire.clone().unwrap_or_default(),
        }
    };
    let sequential = cfg.probe.is_some() || !matches!(responder, Responder::None);
    if sequential {
        let mut down = false;
        for (i, case) in runnable.iter().enumerate() {
            if let (Some(probe), false, true) = (&cfg.probe, down, i > 0) {
                if !probe_ok(case.protocol, ep, probe, cfg.timeout) {
                    log::warn!(
                        "liveness probe failed before {}; remaining verdicts are Indeterminate",
                        case.case_id
                    );
                    down = true;
                }
            }
            let (out, ctx, note) = execute(case, i, ep, &responder, cfg.timeout);
            report.verdicts.push(judge(case, out, ctx, note, down));
        }
    } else {
        let indexed: Vec<(usize, &TestCase)> = runnable.iter().copied().enumerate().collect();
        report.verdicts = par_map(&indexed, cfg.workers, |(i, case)| {
            let (out, ctx, note) = execute(case, *i, ep, &responder, cfg.timeout);
            judge(case, out, ctx, note, false)
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FindingRef {
    pub case_id: String,
    pub rule_id: String,
    pub strategy_id: String,
    pub wire: String,
}

/// One line of findings.jsonl.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
pub enum FindingLine {
    Header {
        schema_version: u32,
        config_hash: String,
        probe: bool,
    },
    Verdict(Verdict),
    Summary {
        counts: Counts,
        skipped: Vec<String>,
        potential_vulnerabilities: Vec<FindingRef>,
    },
}

pub fn findings_lines(report: &Report, config_hash: &str, probe: bool) -> Vec<FindingLine> {
    let mut out = vec![FindingLine::Header {
        schema_version: crate::SCHEMA_VERSION,
        config_hash: config_hash.to_string(),
        probe,
    }];
    out.extend(report.verdicts.iter().cloned().map(FindingLine::Verdict));
    out.push(FindingLine::Summary {
        counts: report.counts(),
        skipped: report.skipped.clone(),
        potential_vulnerabilities: report
            .potential_vulnerabilities()
            .map(|v| FindingRef {
                case_id: v.case_id.clone(),
                rule_id: v.rule_id.clone(),
                strategy_id: v.strategy_id.clone(),
                wire: v.wire.clone(),
            })
            .collect(),
    });
    out
}

pub fn write_findings(
    path: &Path,
    report: &Report,
    config_hash: &str,
    probe: bool,
) -> Result<(), CampaignError> {
    let wrap = |source| CampaignError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(wrap)?;
    }
    let mut f = fs::File::create(path).map_err(wrap)?;
    for line in findings_lines(report, config_hash, probe) {
        let text = serde_json::to_string(&line).expect("findings serialize");
        writeln!(f, "{text}").map_err(wrap)?;
    }
    Ok(())
}

pub fn read_findings(path: &Path) -> Result<Vec<FindingLine>, CampaignError> {
    let wrap = |source| CampaignError::Io {
        path: path.display().to_string(),
        source,
    };
    let text = fs::read_to_string(path).map_err(wrap)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| wrap(std::io::Error::other(e))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names() {
        assert_eq!(Mode::parse("responder"), Some(Mode::Responder));
        assert_eq!(
            serde_json::to_string(&Mode::Client).unwrap(),
            "\"client-sends-case\""
        );
        assert_eq!(Mode::for_message_type("DNS Response"), Mode::Responder);
        assert_eq!(Mode::for_message_type("DNS Query"), Mode::Client);
    }

    #[test]
    fn endpoint_defaults() {
        let d = Endpoint::for_protocol(ProtocolId::Dns, "127.0.0.1", 53, Mode::Client);
        assert_eq!(d.transport, Transport::Udp);
        let t = Endpoint::for_protocol(ProtocolId::Tls13, "127.0.0.1", 443, Mode::Client);
        assert_eq!((t.transport, t.tls_like), (Transport::Tcp, true));
    }

    #[test]
    fn summary_drops_rtt() {
        let a = RawOutcome::Bytes {
            octets: vec![1],
            rtt_ms: 3,
        }
        .summary();
        let b = RawOutcome::Bytes {
            octets: vec![1],
            rtt_ms: 900,
        }
        .summary();
        assert_eq!(a, b);
    }

    #[test]
    fn findings_line_tags() {
        let line = FindingLine::Header {
            schema_version: 1,
            config_hash: "h".into(),
            probe: false,
        };
        let v = serde_json::to_value(&line).unwrap();
        assert_eq!(v["record"], "header");
    }
}

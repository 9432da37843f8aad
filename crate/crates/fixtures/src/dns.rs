//! DNS over UDP: an authoritative server for a fixed zone, or a caching
//! forwarder when an upstream is configured.

use std::collections::HashMap;
use std::io::ErrorKind;
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicU16, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use crate::{lock, BugId, FixtureConfig};

pub const ZONE_APEX: &str = "example.com";

/// (owner, type, ttl, rdata) served in authoritative mode.
pub const ZONE: [(&str, u16, u32, &[u8]); 5] = [
    ("example.com", 1, 300, &[93, 184, 216, 34]),
    ("example.com", 16, 300, b"\x0bv=spf1 -all"),
    ("www.example.com", 1, 300, &[93, 184, 216, 34]),
    (
        "www.example.com",
        28,
        300,
        &[
            0x26, 0x06, 0x28, 0x00, 0x02, 0x20, 0x00, 0x01, 0x02, 0x48, 0x18, 0x93, 0x25, 0xc8,
            0x19, 0x46,
        ],
    ),
    ("mail.example.com", 1, 300, &[93, 184, 216, 35]),
];

const FLUSH_NAME: &str = "cache.flush.invalid";
const CLASS_IN: u16 = 1;
const CLASS_CH: u16 = 3;
const TYPE_TXT: u16 = 16;
const QTYPE_ANY: u16 = 255;

const NOERROR: u8 = 0;
const FORMERR: u8 = 1;
const SERVFAIL: u8 = 2;
const NXDOMAIN: u8 = 3;
const NOTIMP: u8 = 4;
const REFUSED: u8 = 5;

const UPSTREAM_WAIT: Duration = Duration::from_millis(1000);

#[derive(Debug, Clone, PartialEq, Eq)]
struct Rec {
    name: String,
    rtype: u16,
    class: u16,
    ttl: u32,
    rdata: Vec<u8>,
}

#[derive(Debug)]
struct Parsed {
    id: u16,
    qr: bool,
    opcode: u8,
    rcode: u8,
    questions: Vec<(String, u16, u16)>,
    answers: Vec<Rec>,
}

fn u16_at(d: &[u8], p: usize) -> Option<u16> {
    Some(u16::from_be_bytes([*d.get(p)?, *d.get(p + 1)?]))
}

fn read_name(d: &[u8], mut pos: usize) -> Option<(String, usize)> {
    let mut labels: Vec<String> = Vec::new();
    let mut end = None;
    let mut total = 0;
    for _ in 0..128 {
        let len = *d.get(pos)?;
        match len {
            0 => {
                let next = end.unwrap_or(pos + 1);
                return Some((labels.join("."), next));
            }
            l if l & 0xc0 == 0xc0 => {
                let target = usize::from(u16_at(d, pos)? & 0x3fff);
                if target >= pos {
                    return None;
                }
                end.get_or_insert(pos + 2);
                pos = target;
            }
            l if l & 0xc0 != 0 => return None,
            l => {
                let l = usize::from(l);
                let label = d.get(pos + 1..pos + 1 + l)?;
                total += l + 1;
                if total > 255 {
                    return None;
                }
                labels.push(String::from_utf8_lossy(label).into_owned());
                pos += 1 + l;
            }
        }
    }
    None
}

fn parse(d: &[u8]) -> Option<Parsed> {
    if d.len() < 12 {
        return None;
    }
    let flags = u16_at(d, 2)?;
    let counts: Vec<usize> = (0..4)
        .map(|i| usize::from(u16_at(d, 4 + 2 * i).unwrap_or(0)))
        .collect();
    let mut pos = 12;
    let mut questions = Vec::new();
    for _ in 0..counts[0] {
        let (name, p) = read_name(d, pos)?;
        questions.push((name, u16_at(d, p)?, u16_at(d, p + 2)?));
        pos = p + 4;
    }
    let mut records = Vec::new();
    for _ in 0..counts[1] + counts[2] + counts[3] {
        let (name, p) = read_name(d, pos)?;
        let rdlen = usize::from(u16_at(d, p + 8)?);
        let rdata = d.get(p + 10..p + 10 + rdlen)?.to_vec();
        records.push(Rec {
            name,
            rtype: u16_at(d, p)?,
            class: u16_at(d, p + 2)?,
            ttl: (u32::from(u16_at(d, p + 4)?) << 16) | u32::from(u16_at(d, p + 6)?),
            rdata,
        });
        pos = p + 10 + rdlen;
    }
    if pos != d.len() {
        return None;
    }
    records.truncate(counts[1]);
    Some(Parsed {
        id: u16_at(d, 0)?,
        qr: flags & 0x8000 != 0,
        opcode: ((flags >> 11) & 0xf) as u8,
        rcode: (flags & 0xf) as u8,
        questions,
        answers: records,
    })
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    for label in name.split('.').filter(|l| !l.is_empty()) {
        out.push(label.len() as u8);
        out.extend_from_slice(label.as_bytes());
    }
    out.push(0);
}

struct ReplyHead {
    id: u16,
    aa: bool,
    rd: bool,
    ra: bool,
    rcode: u8,
}

fn build(h: ReplyHead, question: Option<&(String, u16, u16)>, answers: &[Rec]) -> Vec<u8> {
    let flags: u16 = 0x8000
        | (u16::from(h.aa) << 10)
        | (u16::from(h.rd) << 8)
        | (u16::from(h.ra) << 7)
        | u16::from(h.rcode);
    let mut out = Vec::with_capacity(512);
    out.extend(h.id.to_be_bytes());
    out.extend(flags.to_be_bytes());
    out.extend(u16::from(question.is_some()).to_be_bytes());
    out.extend((answers.len() as u16).to_be_bytes());
    out.extend([0, 0, 0, 0]);
    if let Some((name, t, c)) = question {
        put_name(&mut out, name);
        out.extend(t.to_be_bytes());
        out.extend(c.to_be_bytes());
    }
    for r in answers {
        put_name(&mut out, &r.name);
        out.extend(r.rtype.to_be_bytes());
        out.extend(r.class.to_be_bytes());
        out.extend(r.ttl.to_be_bytes());
        out.extend((r.rdata.len() as u16).to_be_bytes());
        out.extend_from_slice(&r.rdata);
    }
    out
}

fn same_name(a: &str, b: &str) -> bool {
    a.trim_end_matches('.')
        .eq_ignore_ascii_case(b.trim_end_matches('.'))
}

fn in_zone(name: &str) -> bool {
    let n = name.trim_end_matches('.').to_ascii_lowercase();
    n == ZONE_APEX || n.ends_with(&format!(".{ZONE_APEX}"))
}

pub struct DnsServer {
    upstream: Option<SocketAddr>,
    cache_all: bool,
    cache: Mutex<HashMap<(String, u16), Vec<Rec>>>,
    next_id: AtomicU16,
}

impl DnsServer {
    pub fn new(cfg: &FixtureConfig) -> Self {
        DnsServer {
            upstream: cfg.upstream,
            cache_all: cfg.has(BugId::DnsExtraRecordCached),
            cache: Mutex::new(HashMap::new()),
            next_id: AtomicU16::new(0x2000),
        }
    }

    /// The query will be forwarded, so it should not block the receive loop.
    pub fn needs_upstream(&self, query: &[u8]) -> bool {
        self.upstream.is_some()
            && parse(query).is_some_and(|p| {
                !p.qr
                    && p.opcode == 0
                    && p.questions.len() == 1
                    && !same_name(&p.questions[0].0, FLUSH_NAME)
                    && {
                        let q = &p.questions[0];
                        !lock(&self.cache).contains_key(&(q.0.to_ascii_lowercase(), q.1))
                    }
            })
    }

    pub fn handle(&self, query: &[u8], stopped: &dyn Fn() -> bool) -> Option<Vec<u8>> {
        if query.len() < 12 || query[2] & 0x80 != 0 {
            return None;
        }
        let id = u16_at(query, 0)?;
        let rd = query[2] & 0x01 != 0;
        let forwarding = self.upstream.is_some();
        let head = |rcode, aa| ReplyHead {
            id,
            aa,
            rd,
            ra: forwarding,
            rcode,
        };
        let Some(p) = parse(query) else {
            return Some(build(head(FORMERR, false), None, &[]));
        };
        if p.opcode != 0 {
            return Some(build(head(NOTIMP, false), p.questions.first(), &[]));
        }
        if p.questions.len() != 1 {
            return Some(build(head(FORMERR, false), None, &[]));
        }
        let q = &p.questions[0];
        if same_name(&q.0, FLUSH_NAME) && q.2 == CLASS_CH {
            lock(&self.cache).clear();
            let txt = Rec {
                name: FLUSH_NAME.into(),
                rtype: TYPE_TXT,
                class: CLASS_CH,
                ttl: 0,
                rdata: b"\x07flushed".to_vec(),
            };
            return Some(build(head(NOERROR, true), Some(q), &[txt]));
        }
        if q.2 != CLASS_IN && q.2 != QTYPE_ANY {
            return Some(build(head(REFUSED, false), Some(q), &[]));
        }
        if forwarding {
            let (rcode, answers) = self.resolve(q, stopped);
            return Some(build(head(rcode, false), Some(q), &answers));
        }
        if !in_zone(&q.0) {
            return Some(build(head(REFUSED, false), Some(q), &[]));
        }
        let owned: Vec<Rec> = ZONE
            .iter()
            .filter(|r| same_name(r.0, &q.0))
            .map(|r| Rec {
                name: q.0.clone(),
                rtype: r.1,
                class: CLASS_IN,
                ttl: r.2,
                rdata: r.3.to_vec(),
            })
            .collect();
        if owned.is_empty() {
            return Some(build(head(NXDOMAIN, true), Some(q), &[]));
        }
        let answers: Vec<Rec> = owned
            .into_iter()
            .filter(|r| q.1 == QTYPE_ANY || r.rtype == q.1)
            .collect();
        Some(build(head(NOERROR, true), Some(q), &answers))
    }

    fn resolve(&self, q: &(String, u16, u16), stopped: &dyn Fn() -> bool) -> (u8, Vec<Rec>) {
        let key = (q.0.to_ascii_lowercase(), q.1);
        if let Some(hit) = lock(&self.cache).get(&key) {
            return (NOERROR, hit.clone());
        }
        let Some(upstream) = self.upstream else {
            return (SERVFAIL, Vec::new());
        };
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let mut fwd = Vec::new();
        fwd.extend(id.to_be_bytes());
        fwd.extend([0x00, 0x00, 0x00, 0x01, 0, 0, 0, 0, 0, 0]);
        put_name(&mut fwd, &q.0);
        fwd.extend(q.1.to_be_bytes());
        fwd.extend(q.2.to_be_bytes());
        let Some(reply) = exchange(upstream, &fwd, stopped) else {
            return (SERVFAIL, Vec::new());
        };
        let Some(r) = parse(&reply) else {
            return (SERVFAIL, Vec::new());
        };
        let echoed =
            r.questions.len() == 1 && same_name(&r.questions[0].0, &q.0) && r.questions[0].1 == q.1;
        if !r.qr || r.id != id || !echoed {
            return (SERVFAIL, Vec::new());
        }
        if r.rcode != NOERROR {
            return (r.rcode, Vec::new());
        }
        let kept: Vec<Rec> = if self.cache_all {
            r.answers
        } else {
            r.answers
                .into_iter()
                .filter(|a| same_name(&a.name, &q.0))
                .collect()
        };
        if !kept.is_empty() {
            lock(&self.cache).insert(key, kept.clone());
        }
        (NOERROR, kept)
    }
}

fn exchange(upstream: SocketAddr, query: &[u8], stopped: &dyn Fn() -> bool) -> Option<Vec<u8>> {
    let bind = if upstream.is_ipv4() {
        "0.0.0.0:0"
    } else {
        "[::]:0"
    };
    let sock = UdpSocket::bind(bind).ok()?;
    sock.connect(upstream).ok()?;
    sock.set_read_timeout(Some(Duration::from_millis(20)))
        .ok()?;
    sock.send(query).ok()?;
    let start = Instant::now();
    let mut buf = vec![0u8; 65535];
    while start.elapsed() < UPSTREAM_WAIT && !stopped() {
        match sock.recv(&mut buf) {
            Ok(n) => return Some(buf[..n].to_vec()),
            Err(e)
                if matches!(
                    e.kind(),
                    ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted
                ) => {}
            Err(_) => return None,
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use semfuzz_core::message::ProtocolId;

    fn query(name: &str, qtype: u16, class: u16) -> Vec<u8> {
        let mut q = vec![0x12, 0x34, 0x01, 0x00, 0, 1, 0, 0, 0, 0, 0, 0];
        put_name(&mut q, name);
        q.extend(qtype.to_be_bytes());
        q.extend(class.to_be_bytes());
        q
    }

    fn never() -> bool {
        false
    }

    #[test]
    fn authoritative_answers() {
        let s = DnsServer::new(&FixtureConfig::new(ProtocolId::Dns));
        let r = parse(&s.handle(&query("www.example.com", 1, 1), &never).unwrap()).unwrap();
        assert_eq!((r.rcode, r.answers.len()), (NOERROR, 1));
        assert_eq!(r.answers[0].rdata, [93, 184, 216, 34]);
        let nx = parse(&s.handle(&query("nope.example.com", 1, 1), &never).unwrap()).unwrap();
        assert_eq!(nx.rcode, NXDOMAIN);
        let out = parse(&s.handle(&query("www.example.org", 1, 1), &never).unwrap()).unwrap();
        assert_eq!(out.rcode, REFUSED);
    }

    #[test]
    fn malformed_query_is_formerr() {
        let s = DnsServer::new(&FixtureConfig::new(ProtocolId::Dns));
        let mut q = query("www.example.com", 1, 1);
        q.push(0);
        let r = s.handle(&q, &never).unwrap();
        assert_eq!(r[3] & 0x0f, FORMERR);
        assert!(s.handle(&q[..5], &never).is_none());
    }

    #[test]
    fn compression_pointers_must_point_back() {
        let mut d = vec![0u8; 12];
        d.extend([0xc0, 12]);
        assert!(read_name(&d, 12).is_none());
        let mut ok = vec![0u8; 12];
        put_name(&mut ok, "a.b");
        ok.extend([0xc0, 12]);
        assert_eq!(read_name(&ok, 17).unwrap(), ("a.b".to_string(), 19));
    }
}

//! Shared helpers for integration tests: the bundled corpus, a generator of
//! valid action sequences, and a wire-level length/count oracle written
//! independently of the codecs.

#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use rand::Rng;

use semfuzz_core::ingest::{MessageTypeList, SeedCorpus};
use semfuzz_core::message::{FieldNode, FieldValue, Message, ProtocolId};
use semfuzz_core::path::FieldPath;
use semfuzz_core::testcase::Action;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn corpus() -> (MessageTypeList, SeedCorpus) {
    static LOADED: OnceLock<(MessageTypeList, SeedCorpus)> = OnceLock::new();
    LOADED
        .get_or_init(|| {
            let types =
                MessageTypeList::load(&data_dir().join("message_types.json")).expect("types");
            let corpus = SeedCorpus::load_dir(&data_dir().join("seeds"), &types).expect("seeds");
            (types, corpus)
        })
        .clone()
}

fn p(s: &str) -> FieldPath {
    FieldPath::parse(s).expect("path")
}

fn items(msg: &Message, path: &str) -> Vec<FieldNode> {
    msg.get_str(path)
        .ok()
        .and_then(|n| n.value.nodes())
        .map(<[FieldNode]>::to_vec)
        .unwrap_or_default()
}

fn random_bytes(rng: &mut impl Rng, min: usize, max: usize) -> Vec<u8> {
    let n = rng.random_range(min..=max);
    (0..n).map(|_| rng.random()).collect()
}

fn random_token(rng: &mut impl Rng, alphabet: &[u8], min: usize, max: usize) -> String {
    let n = rng.random_range(min..=max);
    (0..n)
        .map(|_| alphabet[rng.random_range(0..alphabet.len())] as char)
        .collect()
}

const LOWER: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
const VISIBLE: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789-_.,;=/ ()*";

fn dns_name(rng: &mut impl Rng) -> String {
    let labels = rng.random_range(1..=4);
    (0..labels)
        .map(|_| random_token(rng, LOWER, 1, 20))
        .collect::<Vec<_>>()
        .join(".")
}

fn apply(msg: &Message, a: &Action) -> Message {
    match a {
        Action::Add {
            parent,
            position,
            field,
        } => msg.insert_at(parent, *position, field.clone()),
        Action::Remove { target } => msg.remove_at(target),
        Action::Update { target, value, .. } => {
            msg.update_at(target, value.clone().expect("generator sets values"))
        }
    }
    .expect("generated action applies")
}

fn update(target: &str, value: FieldValue) -> Action {
    Action::Update {
        target: p(target),
        value: Some(value),
        freeze_derived: false,
    }
}

fn dns_step(rng: &mut impl Rng, cur: &Message) -> Option<Action> {
    let qs = items(cur, "question").len();
    let section = ["answer", "authority", "additional"][rng.random_range(0..3)];
    let rrs = items(cur, section).len();
    Some(match rng.random_range(0..7) {
        0 if qs > 0 => update(
            &format!("question[{}].qname", rng.random_range(0..qs)),
            FieldValue::text(dns_name(rng)),
        ),
        1 => Action::Add {
            parent: p("question"),
            position: None,
            field: FieldNode::new(
                "question",
                FieldValue::composite(vec![
                    FieldNode::new("qname", FieldValue::text(dns_name(rng))),
                    FieldNode::new("qtype", FieldValue::uint(16, rng.random_range(1..=28))),
                    FieldNode::new("qclass", FieldValue::uint(16, 1)),
                ]),
            ),
        },
        2 if qs > 1 => Action::Remove {
            target: p(&format!("question[{}]", rng.random_range(0..qs))),
        },
        3 => Action::Add {
            parent: p(section),
            position: Some(rng.random_range(0..=rrs)),
            field: FieldNode::new(
                "record",
                FieldValue::composite(vec![
                    FieldNode::new("name", FieldValue::text(dns_name(rng))),
                    FieldNode::new("type", FieldValue::uint(16, 16)),
                    FieldNode::new("class", FieldValue::uint(16, 1)),
                    FieldNode::new(
                        "ttl",
                        FieldValue::uint(32, rng.random_range(0..=u32::MAX as u64)),
                    ),
                    FieldNode::derived("rdlength", FieldValue::uint(16, 0)),
                    FieldNode::new("rdata", FieldValue::bytes(random_bytes(rng, 0, 60))),
                ]),
            ),
        },
        4 if rrs > 0 => Action::Remove {
            target: p(&format!("{section}[{}]", rng.random_range(0..rrs))),
        },
        5 if rrs > 0 => update(
            &format!("{section}[{}].ttl", rng.random_range(0..rrs)),
            FieldValue::uint(32, rng.random_range(0..=u32::MAX as u64)),
        ),
        _ => update(
            "header.id",
            FieldValue::uint(16, rng.random_range(0..=0xffff)),
        ),
    })
}

fn http_step(rng: &mut impl Rng, cur: &Message, serial: usize) -> Option<Action> {
    let headers: Vec<String> = items(cur, "headers").into_iter().map(|h| h.name).collect();
    let plain: Vec<&String> = headers
        .iter()
        .filter(|h| !h.eq_ignore_ascii_case("content-length"))
        .collect();
    let has_cl = headers
        .iter()
        .any(|h| h.eq_ignore_ascii_case("content-length"));
    Some(match rng.random_range(0..5) {
        0 if !plain.is_empty() => update(
            &format!("headers.{}.value", plain[rng.random_range(0..plain.len())]),
            FieldValue::text(random_token(rng, VISIBLE, 1, 40).trim().to_string() + "v"),
        ),
        1 => {
            let name = format!("X-Fuzz-{serial}");
            Action::Add {
                parent: p("headers"),
                position: Some(rng.random_range(0..=headers.len())),
                field: FieldNode::new(
                    name.clone(),
                    FieldValue::composite(vec![
                        FieldNode::new("name", FieldValue::text(name)),
                        FieldNode::new("sep", FieldValue::text(": ")),
                        FieldNode::new("value", FieldValue::text(random_token(rng, LOWER, 1, 30))),
                        FieldNode::new("eol", FieldValue::text("\r\n")),
                    ]),
                ),
            }
        }
        2 if plain.len() > 1 => Action::Remove {
            target: p(&format!(
                "headers.{}",
                plain[rng.random_range(0..plain.len())]
            )),
        },
        3 if has_cl => update("body", FieldValue::bytes(random_bytes(rng, 0, 200))),
        _ => update(
            "request_line.target",
            FieldValue::text(format!("/{}", random_token(rng, LOWER, 0, 30))),
        ),
    })
}

fn tls_step(rng: &mut impl Rng, cur: &Message) -> Option<Action> {
    let exts = items(cur, "handshake.extensions");
    let has_exts = cur.get_str("handshake.extensions").is_ok();
    let suites = items(cur, "handshake.cipher_suites");
    Some(match rng.random_range(0..6) {
        0 if !exts.is_empty() => update(
            &format!(
                "handshake.extensions[{}].data",
                rng.random_range(0..exts.len())
            ),
            FieldValue::bytes(random_bytes(rng, 0, 60)),
        ),
        1 if exts.len() > 1 => Action::Remove {
            target: p(&format!(
                "handshake.extensions[{}]",
                rng.random_range(0..exts.len())
            )),
        },
        2 if has_exts => Action::Add {
            parent: p("handshake.extensions"),
            position: Some(rng.random_range(0..=exts.len())),
            field: FieldNode::new(
                "padding",
                FieldValue::composite(vec![
                    FieldNode::new("type", FieldValue::uint(16, 21)),
                    FieldNode::derived("length", FieldValue::uint(16, 0)),
                    FieldNode::new("data", FieldValue::bytes(vec![0; rng.random_range(0..=40)])),
                ]),
            ),
        },
        3 if !suites.is_empty() => Action::Add {
            parent: p("handshake.cipher_suites"),
            position: None,
            field: FieldNode::new(
                suites[0].name.clone(),
                FieldValue::uint(16, rng.random_range(0..=0xffff)),
            ),
        },
        4 if suites.len() > 1 => Action::Remove {
            target: p(&format!(
                "handshake.cipher_suites[{}]",
                rng.random_range(0..suites.len())
            )),
        },
        _ => update(
            "handshake.session_id",
            FieldValue::bytes(random_bytes(rng, 0, 32)),
        ),
    })
}

/// One to four actions, each valid against the message produced by the previous ones.
pub fn random_actions(rng: &mut impl Rng, seed: &Message) -> Vec<Action> {
    let n = rng.random_range(1..=4);
    let mut cur = seed.clone();
    let mut out = Vec::new();
    let mut serial = 0;
    while out.len() < n {
        serial += 1;
        let step = match seed.protocol {
            ProtocolId::Dns => dns_step(rng, &cur),
            ProtocolId::Http1 => http_step(rng, &cur, serial),
            ProtocolId::Tls13 => tls_step(rng, &cur),
            ProtocolId::Ipv6 => None,
        };
        let Some(a) = step else { break };
        cur = apply(&cur, &a);
        out.push(a);
    }
    out
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let s = self
            .b
            .get(self.pos..self.pos + n)
            .ok_or(format!("short read of {n} at {}", self.pos))?;
        self.pos += n;
        Ok(s)
    }
    fn uint(&mut self, n: usize) -> Result<usize, String> {
        Ok(self
            .take(n)?
            .iter()
            .fold(0usize, |acc, b| acc << 8 | *b as usize))
    }
    fn rest(&self) -> usize {
        self.b.len() - self.pos
    }
}

fn skip_dns_name(c: &mut Cursor) -> Result<(), String> {
    loop {
        let len = c.uint(1)?;
        match len {
            0 => return Ok(()),
            l if l & 0xc0 == 0xc0 => {
                c.take(1)?;
                return Ok(());
            }
            l if l <= 63 => {
                c.take(l)?;
            }
            l => return Err(format!("bad label length {l}")),
        }
    }
}

fn dns_oracle(tree: &Message, wire: &[u8]) -> Result<(), String> {
    let mut c = Cursor { b: wire, pos: 0 };
    c.take(4)?;
    let sections = ["question", "answer", "authority", "additional"];
    let mut counts = [0usize; 4];
    for (i, s) in sections.iter().enumerate() {
        counts[i] = c.uint(2)?;
        let have = items(tree, s).len();
        if counts[i] != have {
            return Err(format!(
                "{s} count {} on the wire, {have} in the tree",
                counts[i]
            ));
        }
    }
    for _ in 0..counts[0] {
        skip_dns_name(&mut c)?;
        c.take(4)?;
    }
    for (i, s) in sections.iter().enumerate().skip(1) {
        for rr in items(tree, s).iter().take(counts[i]) {
            skip_dns_name(&mut c)?;
            c.take(8)?;
            let rdlength = c.uint(2)?;
            let rdata = c.take(rdlength)?;
            let tree_rdata = rr
                .child("rdata")
                .and_then(|n| n.value.as_bytes())
                .unwrap_or_default();
            if rdata != tree_rdata {
                return Err(format!(
                    "rdlength {rdlength} does not frame the tree rdata ({} octets)",
                    tree_rdata.len()
                ));
            }
        }
    }
    if c.rest() != 0 {
        return Err(format!("{} trailing octets", c.rest()));
    }
    Ok(())
}

fn http_oracle(tree: &Message, wire: &[u8]) -> Result<(), String> {
    let end = wire
        .windows(4)
        .position(|w| w == b"\r\n\r\n")
        .ok_or("no end of head")?;
    let head = std::str::from_utf8(&wire[..end]).map_err(|e| e.to_string())?;
    let body = &wire[end + 4..];
    let mut lines = head.split("\r\n");
    lines.next().ok_or("no request line")?;
    let header_lines: Vec<&str> = lines.collect();
    let tree_headers = items(tree, "headers").len();
    if header_lines.len() != tree_headers {
        return Err(format!(
            "{} header lines, {tree_headers} in the tree",
            header_lines.len()
        ));
    }
    for line in header_lines {
        let (name, value) = line
            .split_once(':')
            .ok_or(format!("header without colon: {line:?}"))?;
        if name.trim().eq_ignore_ascii_case("content-length") {
            let declared: usize = value
                .trim()
                .parse()
                .map_err(|e| format!("content-length {value:?}: {e}"))?;
            if declared != body.len() {
                return Err(format!("content-length {declared}, body {}", body.len()));
            }
        }
    }
    Ok(())
}

fn tls_oracle(tree: &Message, wire: &[u8]) -> Result<(), String> {
    let mut c = Cursor { b: wire, pos: 0 };
    c.take(3)?;
    let record_len = c.uint(2)?;
    if record_len != c.rest() {
        return Err(format!(
            "record length {record_len}, {} octets follow",
            c.rest()
        ));
    }
    c.take(1)?;
    let hs_len = c.uint(3)?;
    if hs_len != c.rest() {
        return Err(format!(
            "handshake length {hs_len}, {} octets follow",
            c.rest()
        ));
    }
    c.take(2 + 32)?;
    let sid = c.uint(1)?;
    c.take(sid)?;
    let cs_len = c.uint(2)?;
    let suites = items(tree, "handshake.cipher_suites").len();
    if cs_len != 2 * suites {
        return Err(format!("cipher_suites_length {cs_len} for {suites} suites"));
    }
    c.take(cs_len)?;
    let comp = c.uint(1)?;
    c.take(comp)?;
    let tree_exts = items(tree, "handshake.extensions");
    if c.rest() == 0 && tree.get_str("handshake.extensions").is_err() {
        return Ok(());
    }
    let ext_len = c.uint(2)?;
    if ext_len != c.rest() {
        return Err(format!(
            "extensions_length {ext_len}, {} octets follow",
            c.rest()
        ));
    }
    let mut seen = 0;
    while c.rest() > 0 {
        c.take(2)?;
        let len = c.uint(2)?;
        let data = c.take(len)?;
        let want = tree_exts
            .get(seen)
            .and_then(|e| e.child("data"))
            .and_then(|d| d.value.as_bytes())
            .ok_or("more extensions on the wire than in the tree")?;
        if data != want {
            return Err(format!(
                "extension {seen}: length {len} does not frame its data"
            ));
        }
        seen += 1;
    }
    if seen != tree_exts.len() {
        return Err(format!(
            "{seen} extensions on the wire, {} in the tree",
            tree_exts.len()
        ));
    }
    Ok(())
}

/// Check every length and count on the wire against the tree it came from.
pub fn length_count_oracle(tree: &Message, wire: &[u8]) -> Result<(), String> {
    match tree.protocol {
        ProtocolId::Dns => dns_oracle(tree, wire),
        ProtocolId::Http1 => http_oracle(tree, wire),
        ProtocolId::Tls13 => tls_oracle(tree, wire),
        ProtocolId::Ipv6 => Err("no IPv6 oracle".into()),
    }
}

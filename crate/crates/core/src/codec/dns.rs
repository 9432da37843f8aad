//! DNS messages in their standard binary layout.
//!
//! Names are text nodes in dotted form. Compression pointers are resolved on
//! decode and regenerated on encode by greedy suffix matching against names
//! already written, which is what common resolvers emit. `rdata` stays opaque.

use std::collections::HashMap;

use super::{
    write_binary, BitWriter, CodecError, CodecSchema, DerivedRule, Reader, Recompute, Source,
};
use crate::message::{FieldNode, FieldValue, ProtocolId};
use crate::path::FieldPath;

pub const SECTIONS: [&str; 4] = ["question", "answer", "authority", "additional"];

pub(super) fn schema() -> CodecSchema {
    let mut rules = vec![
        DerivedRule::new(
            "header.qdcount",
            Recompute::CountOf(Source::Path("question")),
        ),
        DerivedRule::new("header.ancount", Recompute::CountOf(Source::Path("answer"))),
        DerivedRule::new(
            "header.nscount",
            Recompute::CountOf(Source::Path("authority")),
        ),
        DerivedRule::new(
            "header.arcount",
            Recompute::CountOf(Source::Path("additional")),
        ),
    ];
    for section in &SECTIONS[1..] {
        rules.push(DerivedRule::new(
            &format!("{section}[*].rdlength"),
            Recompute::EncodedLength(Source::Sibling("rdata")),
        ));
    }
    CodecSchema {
        protocol: ProtocolId::Dns,
        derived_rules: rules,
        case_insensitive_names: false,
    }
}

const FLAG_LAYOUT: [(&str, u8); 10] = [
    ("qr", 1),
    ("opcode", 4),
    ("aa", 1),
    ("tc", 1),
    ("rd", 1),
    ("ra", 1),
    ("z", 1),
    ("ad", 1),
    ("cd", 1),
    ("rcode", 4),
];

fn read_name(r: &mut Reader<'_>) -> Result<String, CodecError> {
    let data = r.data();
    let mut labels: Vec<String> = Vec::new();
    let mut pos = r.pos();
    let mut jumped = false;
    let mut hops = 0;
    let mut wire_len = 0usize;
    loop {
        let len = *data
            .get(pos)
            .ok_or_else(|| CodecError::malformed(format!("name runs past end at offset {pos}")))?
            as usize;
        match len & 0xC0 {
            0x00 => {
                if !jumped {
                    wire_len += 1 + len;
                }
                if len == 0 {
                    break;
                }
                let label = data
                    .get(pos + 1..pos + 1 + len)
                    .ok_or_else(|| CodecError::malformed("label runs past end"))?;
                let text = std::str::from_utf8(label)
                    .map_err(|_| CodecError::malformed("label is not UTF-8"))?;
                if text.contains('.') {
                    return Err(CodecError::malformed("label contains a dot"));
                }
                labels.push(text.to_string());
                pos += 1 + len;
            }
            0xC0 => {
                let lo = *data
                    .get(pos + 1)
                    .ok_or_else(|| CodecError::malformed("truncated pointer"))?
                    as usize;
                let target = ((len & 0x3F) << 8) | lo;
                if !jumped {
                    wire_len += 2;
                }
                if target >= pos {
                    return Err(CodecError::malformed(format!(
                        "forward compression pointer at {pos}"
                    )));
                }
                hops += 1;
                if hops > 64 {
                    return Err(CodecError::malformed("compression loop"));
                }
                jumped = true;
                pos = target;
            }
            _ => {
                return Err(CodecError::malformed(format!(
                    "reserved label type at offset {pos}"
                )))
            }
        }
    }
    r.take(wire_len, "name")?;
    Ok(labels.join("."))
}

fn uint_node(r: &mut Reader<'_>, name: &str, bytes: usize) -> Result<FieldNode, CodecError> {
    let off = r.pos();
    let v = r.uint(bytes, name)?;
    Ok(FieldNode::new(name, FieldValue::uint((bytes * 8) as u8, v)).with_meta(off, bytes))
}

fn derived_uint(
    r: &mut Reader<'_>,
    name: &str,
    bytes: usize,
) -> Result<(FieldNode, u64), CodecError> {
    let mut n = uint_node(r, name, bytes)?;
    n.derived = true;
    let v = n.value.as_uint().unwrap_or(0);
    Ok((n, v))
}

fn name_node(r: &mut Reader<'_>, field: &str) -> Result<FieldNode, CodecError> {
    let off = r.pos();
    let name = read_name(r)?;
    Ok(FieldNode::new(field, FieldValue::text(name)).with_meta(off, r.pos() - off))
}

pub(super) fn decode(bytes: &[u8]) -> Result<FieldNode, CodecError> {
    let mut r = Reader::new(bytes);
    if bytes.len() < 12 {
        return Err(CodecError::malformed(format!(
            "DNS header needs 12 bytes, got {}",
            bytes.len()
        )));
    }
    let id = uint_node(&mut r, "id", 2)?;
    let flags_off = r.pos();
    let raw_flags = r.u16("flags")?;
    let mut shift = 16u8;
    let flag_nodes = FLAG_LAYOUT
        .iter()
        .map(|(name, width)| {
            shift -= width;
            let v = (u64::from(raw_flags) >> shift) & ((1u64 << width) - 1);
            FieldNode::new(*name, FieldValue::uint(*width, v))
        })
        .collect();
    let flags = FieldNode::new("flags", FieldValue::composite(flag_nodes)).with_meta(flags_off, 2);
    let mut counts = [0u64; 4];
    let mut count_nodes = Vec::new();
    for (i, name) in ["qdcount", "ancount", "nscount", "arcount"]
        .iter()
        .enumerate()
    {
        let (n, v) = derived_uint(&mut r, name, 2)?;
        counts[i] = v;
        count_nodes.push(n);
    }
    let mut header_children = vec![id, flags];
    header_children.extend(count_nodes);
    let header = FieldNode::new("header", FieldValue::composite(header_children)).with_meta(0, 12);

    let mut questions = Vec::new();
    for _ in 0..counts[0] {
        let off = r.pos();
        let qname = name_node(&mut r, "qname")?;
        let qtype = uint_node(&mut r, "qtype", 2)?;
        let qclass = uint_node(&mut r, "qclass", 2)?;
        questions.push(
            FieldNode::new(
                "question",
                FieldValue::composite(vec![qname, qtype, qclass]),
            )
            .with_meta(off, r.pos() - off),
        );
    }
    let mut sections = vec![
        header,
        FieldNode::new("question", FieldValue::list(questions)),
    ];
    for (i, section) in SECTIONS[1..].iter().enumerate() {
        let mut records = Vec::new();
        for _ in 0..counts[i + 1] {
            records.push(read_record(&mut r)?);
        }
        sections.push(FieldNode::new(*section, FieldValue::list(records)));
    }
    if r.remaining() != 0 {
        return Err(CodecError::malformed(format!(
            "{} trailing bytes after last record",
            r.remaining()
        )));
    }
    Ok(FieldNode::new("dns", FieldValue::composite(sections)).with_meta(0, bytes.len()))
}

fn read_record(r: &mut Reader<'_>) -> Result<FieldNode, CodecError> {
    let off = r.pos();
    let name = name_node(r, "name")?;
    let rtype = uint_node(r, "type", 2)?;
    let class = uint_node(r, "class", 2)?;
    let ttl = uint_node(r, "ttl", 4)?;
    let (rdlength, len) = derived_uint(r, "rdlength", 2)?;
    let rd_off = r.pos();
    let rdata = r.take(len as usize, "rdata")?;
    let rdata =
        FieldNode::new("rdata", FieldValue::bytes(rdata.to_vec())).with_meta(rd_off, len as usize);
    Ok(FieldNode::new(
        "record",
        FieldValue::composite(vec![name, rtype, class, ttl, rdlength, rdata]),
    )
    .with_meta(off, r.pos() - off))
}

fn labels_of<'a>(name: &'a str, path: &FieldPath) -> Result<Vec<&'a str>, CodecError> {
    let trimmed = name.strip_suffix('.').unwrap_or(name);
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    let labels: Vec<&str> = trimmed.split('.').collect();
    let mut total = 1;
    for l in &labels {
        if l.is_empty() {
            return Err(CodecError::unencodable(path, "empty label in name"));
        }
        if l.len() > 63 {
            return Err(CodecError::unencodable(
                path,
                format!("label of {} octets exceeds 63", l.len()),
            ));
        }
        total += l.len() + 1;
    }
    if total > 255 {
        return Err(CodecError::unencodable(
            path,
            format!("name of {total} octets exceeds 255"),
        ));
    }
    Ok(labels)
}

fn write_name_plain(name: &str, path: &FieldPath, out: &mut BitWriter) -> Result<(), CodecError> {
    for label in labels_of(name, path)? {
        out.write_bytes(&[label.len() as u8]);
        out.write_bytes(label.as_bytes());
    }
    out.write_bytes(&[0]);
    Ok(())
}

pub(super) fn encode_subtree(node: &FieldNode, path: &FieldPath) -> Result<Vec<u8>, CodecError> {
    let mut out = BitWriter::new();
    write_binary(node, path, &mut out, &mut |t, p, w| {
        write_name_plain(t, p, w)
    })?;
    out.finish()
}

pub(super) fn encode_message(root: &FieldNode) -> Result<Vec<u8>, CodecError> {
    // suffix (joined labels) -> offset of its first label
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut out = BitWriter::new();
    write_binary(root, &FieldPath::root(), &mut out, &mut |name, path, w| {
        let labels = labels_of(name, path)?;
        for i in 0..labels.len() {
            let suffix = labels[i..].join(".");
            if let Some(&off) = seen.get(&suffix) {
                w.write_bits(0xC000 | off as u64, 16);
                return Ok(());
            }
            let here = w.len();
            if here < 0x4000 {
                seen.insert(suffix, here);
            }
            w.write_bytes(&[labels[i].len() as u8]);
            w.write_bytes(labels[i].as_bytes());
        }
        w.write_bytes(&[0]);
        Ok(())
    })?;
    out.finish()
}

/// Builder used by fixtures and tests for DNS messages.
pub fn header(id: u16, flags: DnsFlags) -> FieldNode {
    let values = [
        u64::from(flags.qr),
        u64::from(flags.opcode),
        u64::from(flags.aa),
        u64::from(flags.tc),
        u64::from(flags.rd),
        u64::from(flags.ra),
        0,
        0,
        0,
        u64::from(flags.rcode),
    ];
    let flag_nodes = FLAG_LAYOUT
        .iter()
        .zip(values)
        .map(|((n, w), v)| FieldNode::new(*n, FieldValue::uint(*w, v)))
        .collect();
    FieldNode::new(
        "header",
        FieldValue::composite(vec![
            FieldNode::new("id", FieldValue::uint(16, u64::from(id))),
            FieldNode::new("flags", FieldValue::composite(flag_nodes)),
            FieldNode::derived("qdcount", FieldValue::uint(16, 0)),
            FieldNode::derived("ancount", FieldValue::uint(16, 0)),
            FieldNode::derived("nscount", FieldValue::uint(16, 0)),
            FieldNode::derived("arcount", FieldValue::uint(16, 0)),
        ]),
    )
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DnsFlags {
    pub qr: bool,
    pub opcode: u8,
    pub aa: bool,
    pub tc: bool,
    pub rd: bool,
    pub ra: bool,
    pub rcode: u8,
}

pub fn question(qname: &str, qtype: u16, qclass: u16) -> FieldNode {
    FieldNode::new(
        "question",
        FieldValue::composite(vec![
            FieldNode::new("qname", FieldValue::text(qname)),
            FieldNode::new("qtype", FieldValue::uint(16, u64::from(qtype))),
            FieldNode::new("qclass", FieldValue::uint(16, u64::from(qclass))),
        ]),
    )
}

pub fn record(name: &str, rtype: u16, class: u16, ttl: u32, rdata: &[u8]) -> FieldNode {
    FieldNode::new(
        "record",
        FieldValue::composite(vec![
            FieldNode::new("name", FieldValue::text(name)),
            FieldNode::new("type", FieldValue::uint(16, u64::from(rtype))),
            FieldNode::new("class", FieldValue::uint(16, u64::from(class))),
            FieldNode::new("ttl", FieldValue::uint(32, u64::from(ttl))),
            FieldNode::derived("rdlength", FieldValue::uint(16, rdata.len() as u64)),
            FieldNode::new("rdata", FieldValue::bytes(rdata.to_vec())),
        ]),
    )
}

/// Assemble a full DNS tree from sections.
pub fn message_root(
    header: FieldNode,
    questions: Vec<FieldNode>,
    answers: Vec<FieldNode>,
    authority: Vec<FieldNode>,
    additional: Vec<FieldNode>,
) -> FieldNode {
    FieldNode::new(
        "dns",
        FieldValue::composite(vec![
            header,
            FieldNode::new("question", FieldValue::list(questions)),
            FieldNode::new("answer", FieldValue::list(answers)),
            FieldNode::new("authority", FieldValue::list(authority)),
            FieldNode::new("additional", FieldValue::list(additional)),
        ]),
    )
}

/// Read-only view over a decoded DNS tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DnsSummary {
    pub id: u16,
    pub qr: bool,
    pub opcode: u8,
    pub rcode: u8,
    pub questions: Vec<(String, u16, u16)>,
    /// (section, owner, type, class, ttl, rdata)
    pub records: Vec<(String, String, u16, u16, u32, Vec<u8>)>,
}

pub fn summarize(root: &FieldNode) -> Option<DnsSummary> {
    let header = root.child("header")?;
    let flags = header.child("flags")?;
    let mut questions = Vec::new();
    for q in root.child("question")?.children() {
        questions.push((
            q.child("qname")?.value.as_text()?.to_string(),
            q.child_uint("qtype")? as u16,
            q.child_uint("qclass")? as u16,
        ));
    }
    let mut records = Vec::new();
    for section in &SECTIONS[1..] {
        for rec in root.child(section)?.children() {
            records.push((
                section.to_string(),
                rec.child("name")?.value.as_text()?.to_string(),
                rec.child_uint("type")? as u16,
                rec.child_uint("class")? as u16,
                rec.child_uint("ttl")? as u32,
                rec.child("rdata")?.value.as_bytes()?.to_vec(),
            ));
        }
    }
    Some(DnsSummary {
        id: header.child_uint("id")? as u16,
        qr: flags.child_uint("qr")? == 1,
        opcode: flags.child_uint("opcode")? as u8,
        rcode: flags.child_uint("rcode")? as u8,
        questions,
        records,
    })
}

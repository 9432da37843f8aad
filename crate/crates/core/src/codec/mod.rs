//! Wire codecs for DNS, HTTP/1.1 and the TLS 1.3 hello/alert subset.
//!
//! Decoding flags length and count fields as `derived`. Encoding first runs
//! [`repair_derived`] so a mutated tree always leaves with consistent
//! lengths, unless the caller explicitly freezes a path through
//! [`encode_with`].

pub mod dns;
pub mod http;
pub mod tls;

mod bits;

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use thiserror::Error;

use crate::message::{uint_fits, FieldNode, FieldValue, Message, MessageError, ProtocolId};
use crate::path::{FieldPath, Segment};

pub(crate) use bits::{BitWriter, Reader};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("malformed wire data: {0}")]
    MalformedWire(String),
    #[error("cannot encode {path}: {reason}")]
    Unencodable { path: String, reason: String },
    #[error("derived field {0} has no recompute rule")]
    NoRuleForDerivedField(String),
    #[error("no codec for protocol {0}")]
    Unsupported(ProtocolId),
    #[error(transparent)]
    Message(#[from] MessageError),
    #[error("fixture file {path}: {reason}")]
    Fixture { path: String, reason: String },
}

impl CodecError {
    pub(crate) fn malformed(detail: impl Into<String>) -> Self {
        CodecError::MalformedWire(detail.into())
    }

    pub(crate) fn unencodable(path: &FieldPath, reason: impl Into<String>) -> Self {
        CodecError::Unencodable {
            path: path.to_string(),
            reason: reason.into(),
        }
    }
}

/// Encoded message octets.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WireBytes(Vec<u8>);

impl WireBytes {
    pub fn new(octets: Vec<u8>) -> Self {
        WireBytes(octets)
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.0)
    }
}

impl AsRef<[u8]> for WireBytes {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

impl From<Vec<u8>> for WireBytes {
    fn from(v: Vec<u8>) -> Self {
        WireBytes(v)
    }
}

/// Which nodes a recompute function reads, relative to the derived node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    /// A sibling with this name.
    Sibling(&'static str),
    /// Every sibling after the derived node.
    FollowingSiblings,
    /// Every sibling of the derived node's parent that comes after the parent.
    ParentFollowingSiblings,
    /// An absolute path.
    Path(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Recompute {
    /// Sum of the encoded lengths of the source nodes.
    EncodedLength(Source),
    /// Number of children/items of the source container.
    CountOf(Source),
    Fixed(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DerivedRule {
    pub target: FieldPath,
    pub recompute: Recompute,
}

impl DerivedRule {
    fn new(target: &str, recompute: Recompute) -> Self {
        DerivedRule {
            target: FieldPath::parse(target).expect("static rule pattern"),
            recompute,
        }
    }
}

/// Length-dependency knowledge for one protocol.
#[derive(Debug)]
pub struct CodecSchema {
    pub protocol: ProtocolId,
    pub derived_rules: Vec<DerivedRule>,
    /// Field names compare case-insensitively when matching rule targets (HTTP header names).
    pub case_insensitive_names: bool,
}

impl CodecSchema {
    pub fn rule_for(&self, path: &FieldPath) -> Option<&DerivedRule> {
        self.derived_rules
            .iter()
            .find(|r| r.target.matches(path, self.case_insensitive_names))
    }
}

pub fn schema(protocol: ProtocolId) -> Result<&'static CodecSchema, CodecError> {
    static DNS: OnceLock<CodecSchema> = OnceLock::new();
    static HTTP: OnceLock<CodecSchema> = OnceLock::new();
    static TLS: OnceLock<CodecSchema> = OnceLock::new();
    match protocol {
        ProtocolId::Dns => Ok(DNS.get_or_init(dns::schema)),
        ProtocolId::Http1 => Ok(HTTP.get_or_init(http::schema)),
        ProtocolId::Tls13 => Ok(TLS.get_or_init(tls::schema)),
        ProtocolId::Ipv6 => Err(CodecError::Unsupported(protocol)),
    }
}

pub fn decode(
    protocol: ProtocolId,
    message_type: &str,
    bytes: &[u8],
) -> Result<Message, CodecError> {
    if bytes.is_empty() {
        return Err(CodecError::malformed("empty input"));
    }
    let root = match protocol {
        ProtocolId::Dns => dns::decode(bytes)?,
        ProtocolId::Http1 => http::decode(bytes)?,
        ProtocolId::Tls13 => tls::decode(bytes)?,
        ProtocolId::Ipv6 => return Err(CodecError::Unsupported(protocol)),
    };
    Ok(Message::new(protocol, message_type, root))
}

pub fn encode(msg: &Message) -> Result<WireBytes, CodecError> {
    encode_with(msg, &[])
}

/// Encode after repairing every derived field except those at `frozen` paths.
pub fn encode_with(msg: &Message, frozen: &[FieldPath]) -> Result<WireBytes, CodecError> {
    let repaired = repair_derived_except(msg, frozen)?;
    let octets = encode_raw(&repaired)?;
    if octets.is_empty() {
        return Err(CodecError::unencodable(
            &FieldPath::root(),
            "message encodes to zero octets",
        ));
    }
    Ok(WireBytes(octets))
}

/// Serialize the tree as-is, without touching derived fields.
pub fn encode_raw(msg: &Message) -> Result<Vec<u8>, CodecError> {
    match msg.protocol {
        ProtocolId::Dns => dns::encode_message(&msg.root),
        ProtocolId::Http1 => http::encode_message(&msg.root),
        ProtocolId::Tls13 => tls::encode_message(&msg.root),
        ProtocolId::Ipv6 => Err(CodecError::Unsupported(msg.protocol)),
    }
}

/// Encoded size of one subtree, as used by length fields.
pub fn encoded_len(
    protocol: ProtocolId,
    node: &FieldNode,
    path: &FieldPath,
) -> Result<usize, CodecError> {
    match protocol {
        ProtocolId::Dns => dns::encode_subtree(node, path).map(|b| b.len()),
        ProtocolId::Http1 => http::encode_subtree(node, path).map(|b| b.len()),
        ProtocolId::Tls13 => tls::encode_subtree(node, path).map(|b| b.len()),
        ProtocolId::Ipv6 => Err(CodecError::Unsupported(protocol)),
    }
}

pub fn repair_derived(msg: &Message) -> Result<Message, CodecError> {
    repair_derived_except(msg, &[])
}

/// Recompute derived nodes from later siblings and descendants first, so
/// every source is already consistent when its dependent is computed.
pub fn repair_derived_except(msg: &Message, frozen: &[FieldPath]) -> Result<Message, CodecError> {
    let schema = schema(msg.protocol)?;
    let targets: Vec<FieldPath> = msg
        .walk()
        .into_iter()
        .filter(|(_, node)| node.derived)
        .map(|(path, _)| path)
        .collect();
    let mut out = msg.clone();
    for path in targets.into_iter().rev() {
        if frozen.contains(&path) {
            continue;
        }
        let rule = schema
            .rule_for(&path)
            .ok_or_else(|| CodecError::NoRuleForDerivedField(path.to_string()))?;
        let computed = recompute(&out, &path, &rule.recompute)?;
        let node = out.get_mut(&path)?;
        match &mut node.value {
            FieldValue::Uint { bits, value } => {
                if !uint_fits(*bits, computed) {
                    return Err(CodecError::unencodable(
                        &path,
                        format!("{computed} overflows a {bits}-bit field"),
                    ));
                }
                if *value != computed {
                    *value = computed;
                    node.meta = None;
                }
            }
            other => {
                return Err(CodecError::unencodable(
                    &path,
                    format!(
                        "recompute rules produce integers, field holds {}",
                        other.kind()
                    ),
                ))
            }
        }
    }
    Ok(out)
}

fn source_nodes<'m>(
    msg: &'m Message,
    target: &FieldPath,
    source: &Source,
) -> Result<Vec<(FieldPath, &'m FieldNode)>, CodecError> {
    let parent_path = target.parent().unwrap_or_default();
    match source {
        Source::Sibling(name) => {
            let p = parent_path.child(Segment::named(*name));
            Ok(vec![(p.clone(), msg.get(&p)?)])
        }
        Source::Path(p) => {
            let p = FieldPath::parse(p)?;
            Ok(vec![(p.clone(), msg.get(&p)?)])
        }
        Source::FollowingSiblings => {
            let idx = msg.position_in_parent(target)?;
            let parent = msg.parent_of(target)?;
            Ok(parent.children()[idx + 1..]
                .iter()
                .map(|n| (parent_path.child(Segment::named(n.name.clone())), n))
                .collect())
        }
        Source::ParentFollowingSiblings => {
            let grand_path = parent_path.parent().unwrap_or_default();
            let idx = msg.position_in_parent(&parent_path)?;
            let grand = msg.parent_of(&parent_path)?;
            Ok(grand.children()[idx + 1..]
                .iter()
                .map(|n| (grand_path.child(Segment::named(n.name.clone())), n))
                .collect())
        }
    }
}

fn recompute(msg: &Message, target: &FieldPath, how: &Recompute) -> Result<u64, CodecError> {
    match how {
        Recompute::Fixed(v) => Ok(*v),
        Recompute::EncodedLength(src) => {
            let mut total = 0usize;
            for (p, node) in source_nodes(msg, target, src)? {
                total += encoded_len(msg.protocol, node, &p)?;
            }
            Ok(total as u64)
        }
        Recompute::CountOf(src) => {
            let nodes = source_nodes(msg, target, src)?;
            let (p, node) = nodes
                .first()
                .ok_or_else(|| CodecError::unencodable(target, "count source missing"))?;
            node.value
                .nodes()
                .map(|n| n.len() as u64)
                .ok_or_else(|| CodecError::unencodable(p, "count source is not a container"))
        }
    }
}

/// Read a `.hex` fixture: hex digits with arbitrary whitespace, `#` starts a comment.
pub fn load_hex(path: &Path) -> Result<Vec<u8>, CodecError> {
    let text = fs::read_to_string(path).map_err(|e| CodecError::Fixture {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_hex_dump(&text).map_err(|reason| CodecError::Fixture {
        path: path.display().to_string(),
        reason,
    })
}

pub fn parse_hex_dump(text: &str) -> Result<Vec<u8>, String> {
    let digits: String = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(|l| l.chars())
        .filter(|c| !c.is_whitespace())
        .collect();
    hex::decode(&digits).map_err(|e| e.to_string())
}

pub fn load_bin(path: &Path) -> Result<Vec<u8>, CodecError> {
    fs::read(path).map_err(|e| CodecError::Fixture {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Load `.hex` or `.bin` by extension.
pub fn load_fixture(path: &Path) -> Result<Vec<u8>, CodecError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("hex") => load_hex(path),
        _ => load_bin(path),
    }
}

impl fmt::Display for WireBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Shared binary serializer for the TLS and DNS trees: uints are written
/// big-endian at their declared width (sub-byte widths are bit-packed),
/// bytes verbatim, and text through `text`.
pub(crate) fn write_binary<F>(
    node: &FieldNode,
    path: &FieldPath,
    out: &mut BitWriter,
    text: &mut F,
) -> Result<(), CodecError>
where
    F: FnMut(&str, &FieldPath, &mut BitWriter) -> Result<(), CodecError>,
{
    match &node.value {
        FieldValue::Uint { bits, value } => {
            if !uint_fits(*bits, *value) {
                return Err(CodecError::unencodable(path, "value exceeds bit width"));
            }
            out.write_bits(*value, *bits);
            Ok(())
        }
        FieldValue::Bytes { hex } => {
            if !out.aligned() {
                return Err(CodecError::unencodable(
                    path,
                    "bytes field is not byte-aligned",
                ));
            }
            out.write_bytes(hex);
            Ok(())
        }
        FieldValue::Text { text: t } => {
            if !out.aligned() {
                return Err(CodecError::unencodable(
                    path,
                    "text field is not byte-aligned",
                ));
            }
            text(t, path, out)
        }
        FieldValue::Composite { children } => {
            for (p, child) in child_paths(path, children) {
                write_binary(child, &p, out, text)?;
            }
            Ok(())
        }
        FieldValue::List { items } => {
            for (i, item) in items.iter().enumerate() {
                write_binary(
                    item,
                    &path.with_last_index(Some(crate::path::Index::At(i))),
                    out,
                    text,
                )?;
            }
            Ok(())
        }
    }
}

/// Paths for a composite's children; used for error messages while encoding.
pub(crate) fn child_paths<'a>(
    path: &FieldPath,
    children: &'a [FieldNode],
) -> Vec<(FieldPath, &'a FieldNode)> {
    children
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let dupes = children.iter().filter(|o| o.name == c.name).count();
            let seg = if dupes > 1 {
                Segment::indexed(
                    c.name.clone(),
                    children[..i].iter().filter(|o| o.name == c.name).count(),
                )
            } else {
                Segment::named(c.name.clone())
            };
            (path.child(seg), c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_dump_tolerates_comments_and_whitespace() {
        assert_eq!(
            parse_hex_dump("de ad # comment\n be\tef\n").unwrap(),
            vec![0xde, 0xad, 0xbe, 0xef]
        );
        assert!(parse_hex_dump("abc").is_err());
    }

    #[test]
    fn empty_bytes_are_malformed() {
        for p in [ProtocolId::Dns, ProtocolId::Http1, ProtocolId::Tls13] {
            assert!(matches!(
                decode(p, "x", &[]),
                Err(CodecError::MalformedWire(_))
            ));
        }
    }

    #[test]
    fn ipv6_has_no_codec() {
        assert!(matches!(
            decode(ProtocolId::Ipv6, "IPv6 header with TCP", &[0x60]),
            Err(CodecError::Unsupported(_))
        ));
    }
}

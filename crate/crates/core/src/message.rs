//! Ordered field trees for protocol messages.
//!
//! A [`Message`] is the unit every later stage works on: seeds are decoded
//! into it, actions mutate it, codecs encode it back to octets. All mutation
//! helpers return a fresh `Message`; the input is never touched.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::path::{is_valid_name, FieldPath, Index, Segment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProtocolId {
    #[serde(rename = "DNS")]
    Dns,
    #[serde(rename = "HTTP1")]
    Http1,
    #[serde(rename = "TLS13")]
    Tls13,
    /// Message-type metadata only; there is no IPv6 codec.
    #[serde(rename = "IPV6")]
    Ipv6,
}

impl ProtocolId {
    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolId::Dns => "DNS",
            ProtocolId::Http1 => "HTTP1",
            ProtocolId::Tls13 => "TLS13",
            ProtocolId::Ipv6 => "IPV6",
        }
    }

    /// Accepts the canonical ids plus the common spellings ("TLS 1.3", "HTTP/1.1", ...).
    pub fn parse_loose(text: &str) -> Option<ProtocolId> {
        let norm: String = text
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_uppercase();
        match norm.as_str() {
            "DNS" => Some(ProtocolId::Dns),
            "HTTP" | "HTTP1" | "HTTP11" => Some(ProtocolId::Http1),
            "TLS" | "TLS13" => Some(ProtocolId::Tls13),
            "IPV6" => Some(ProtocolId::Ipv6),
            _ => None,
        }
    }
}

impl fmt::Display for ProtocolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MessageError {
    #[error("path not found: {0}")]
    PathNotFound(String),
    #[error("ambiguous path {0}: segment matches several siblings, add an index")]
    AmbiguousPath(String),
    #[error("position {position} out of range for {path} ({len} children)")]
    PositionOutOfRange {
        path: String,
        position: usize,
        len: usize,
    },
    #[error("type mismatch at {path}: {reason}")]
    TypeMismatch { path: String, reason: String },
    #[error("invalid path {path:?}: {reason}")]
    InvalidPath { path: String, reason: String },
    #[error("invalid message: {0}")]
    Invalid(String),
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        hex::decode(text.trim()).map_err(serde::de::Error::custom)
    }
}

/// Value held by a [`FieldNode`].
///
/// `Composite` is a record of named fields; `List` is a sequence of
/// elements addressed by index through the list's own path segment
/// (`handshake.extensions[1]`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FieldValue {
    Bytes {
        #[serde(with = "hex_bytes")]
        hex: Vec<u8>,
    },
    Text {
        text: String,
    },
    Uint {
        bits: u8,
        value: u64,
    },
    Composite {
        children: Vec<FieldNode>,
    },
    List {
        items: Vec<FieldNode>,
    },
}

impl FieldValue {
    pub fn bytes(b: impl Into<Vec<u8>>) -> Self {
        FieldValue::Bytes { hex: b.into() }
    }

    pub fn text(t: impl Into<String>) -> Self {
        FieldValue::Text { text: t.into() }
    }

    pub fn uint(bits: u8, value: u64) -> Self {
        FieldValue::Uint { bits, value }
    }

    pub fn composite(children: Vec<FieldNode>) -> Self {
        FieldValue::Composite { children }
    }

    pub fn list(items: Vec<FieldNode>) -> Self {
        FieldValue::List { items }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            FieldValue::Bytes { .. } => "bytes",
            FieldValue::Text { .. } => "text",
            FieldValue::Uint { .. } => "uint",
            FieldValue::Composite { .. } => "composite",
            FieldValue::List { .. } => "list",
        }
    }

    pub fn as_uint(&self) -> Option<u64> {
        match self {
            FieldValue::Uint { value, .. } => Some(*value),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            FieldValue::Text { text } => Some(text),
            _ => None,
        }
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match self {
            FieldValue::Bytes { hex } => Some(hex),
            _ => None,
        }
    }

    /// Children of a composite or items of a list.
    pub fn nodes(&self) -> Option<&[FieldNode]> {
        match self {
            FieldValue::Composite { children } => Some(children),
            FieldValue::List { items } => Some(items),
            _ => None,
        }
    }

    fn nodes_mut(&mut self) -> Option<&mut Vec<FieldNode>> {
        match self {
            FieldValue::Composite { children } => Some(children),
            FieldValue::List { items } => Some(items),
            _ => None,
        }
    }

    pub fn is_container(&self) -> bool {
        matches!(self, FieldValue::Composite { .. } | FieldValue::List { .. })
    }
}

pub(crate) fn uint_fits(bits: u8, value: u64) -> bool {
    bits >= 64 || value < (1u64 << bits)
}

/// Codec annotations; advisory and dropped on mutation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeMeta {
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldNode {
    pub name: String,
    #[serde(default)]
    pub derived: bool,
    pub value: FieldValue,
    #[serde(skip)]
    pub meta: Option<NodeMeta>,
}

impl PartialEq for FieldNode {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.derived == other.derived && self.value == other.value
    }
}

impl Eq for FieldNode {}

impl FieldNode {
    pub fn new(name: impl Into<String>, value: FieldValue) -> Self {
        FieldNode {
            name: name.into(),
            derived: false,
            value,
            meta: None,
        }
    }

    pub fn derived(name: impl Into<String>, value: FieldValue) -> Self {
        FieldNode {
            derived: true,
            ..FieldNode::new(name, value)
        }
    }

    pub fn with_meta(mut self, offset: usize, len: usize) -> Self {
        self.meta = Some(NodeMeta { offset, len });
        self
    }

    pub fn children(&self) -> &[FieldNode] {
        self.value.nodes().unwrap_or(&[])
    }

    /// First direct child with the given name.
    pub fn child(&self, name: &str) -> Option<&FieldNode> {
        self.children().iter().find(|c| c.name == name)
    }

    pub fn child_uint(&self, name: &str) -> Option<u64> {
        self.child(name).and_then(|c| c.value.as_uint())
    }

    fn strip_meta(&mut self) {
        self.meta = None;
        if let Some(nodes) = self.value.nodes_mut() {
            nodes.iter_mut().for_each(FieldNode::strip_meta);
        }
    }

    fn validate(&self, path: &FieldPath, errors: &mut Vec<String>) {
        if !is_valid_name(&self.name) {
            errors.push(format!("{path}: invalid node name {:?}", self.name));
        }
        if self.derived
            && !matches!(
                self.value,
                FieldValue::Uint { .. } | FieldValue::Bytes { .. }
            )
        {
            errors.push(format!("{path}: derived node must hold uint or bytes"));
        }
        match &self.value {
            FieldValue::Uint { bits, value } => {
                if *bits == 0 || *bits > 64 {
                    errors.push(format!("{path}: bit width {bits} outside 1..=64"));
                } else if !uint_fits(*bits, *value) {
                    errors.push(format!("{path}: value {value} does not fit {bits} bits"));
                }
            }
            FieldValue::Composite { children } => {
                for (seg, child) in child_segments(children).into_iter().zip(children) {
                    child.validate(&path.child(seg), errors);
                }
            }
            FieldValue::List { items } => {
                for (i, item) in items.iter().enumerate() {
                    item.validate(&path.with_last_index(Some(Index::At(i))), errors);
                }
            }
            _ => {}
        }
    }
}

/// Path segments for the children of a composite: an index is attached only
/// when a name occurs more than once.
fn child_segments(children: &[FieldNode]) -> Vec<Segment> {
    let mut out = Vec::with_capacity(children.len());
    for (i, child) in children.iter().enumerate() {
        let total = children.iter().filter(|c| c.name == child.name).count();
        if total > 1 {
            let nth = children[..i]
                .iter()
                .filter(|c| c.name == child.name)
                .count();
            out.push(Segment::indexed(child.name.clone(), nth));
        } else {
            out.push(Segment::named(child.name.clone()));
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Message {
    pub protocol: ProtocolId,
    pub message_type: String,
    pub root: FieldNode,
}

impl PartialEq for Message {
    fn eq(&self, other: &Self) -> bool {
        self.protocol == other.protocol
            && self.message_type == other.message_type
            && self.root == other.root
    }
}

impl Eq for Message {}

/// Where a path segment landed: a node plus how it is reached from its parent.
enum Step {
    /// i-th entry of the parent's child/item vector.
    Child(usize),
}

impl Message {
    pub fn new(protocol: ProtocolId, message_type: impl Into<String>, root: FieldNode) -> Self {
        Message {
            protocol,
            message_type: message_type.into(),
            root,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("message serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("message serializes")
    }

    pub fn from_json(text: &str) -> Result<Message, MessageError> {
        let msg: Message =
            serde_json::from_str(text).map_err(|e| MessageError::Invalid(e.to_string()))?;
        msg.validate()?;
        Ok(msg)
    }

    pub fn validate(&self) -> Result<(), MessageError> {
        if !self.root.value.is_container() {
            return Err(MessageError::Invalid("root must be composite".into()));
        }
        let mut errors = Vec::new();
        if let FieldValue::Composite { children } = &self.root.value {
            for (seg, child) in child_segments(children).into_iter().zip(children) {
                child.validate(&FieldPath::root().child(seg), &mut errors);
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(MessageError::Invalid(errors.join("; ")))
        }
    }

    /// Depth-first, document-order paths of every node except the root.
    pub fn field_paths(&self) -> Vec<FieldPath> {
        let mut out = Vec::new();
        collect_paths(&self.root, &FieldPath::root(), &mut out);
        out
    }

    /// Every path paired with its node, in the same order as [`field_paths`](Self::field_paths).
    pub fn walk(&self) -> Vec<(FieldPath, &FieldNode)> {
        let mut out = Vec::new();
        walk_nodes(&self.root, &FieldPath::root(), &mut out);
        out
    }

    fn locate(&self, path: &FieldPath) -> Result<Vec<Step>, MessageError> {
        let rendered = || path.to_string();
        if path.has_wildcard() {
            return Err(MessageError::AmbiguousPath(rendered()));
        }
        let mut steps = Vec::new();
        let mut node = &self.root;
        for seg in path.segments() {
            let children = match &node.value {
                FieldValue::Composite { children } => children,
                _ => return Err(MessageError::PathNotFound(rendered())),
            };
            let candidates: Vec<usize> = children
                .iter()
                .enumerate()
                .filter(|(_, c)| c.name == seg.name)
                .map(|(i, _)| i)
                .collect();
            match (candidates.len(), seg.index) {
                (0, _) => return Err(MessageError::PathNotFound(rendered())),
                (1, None) => {
                    steps.push(Step::Child(candidates[0]));
                    node = &children[candidates[0]];
                }
                (1, Some(Index::At(i))) => {
                    let only = &children[candidates[0]];
                    if let FieldValue::List { items } = &only.value {
                        if i >= items.len() {
                            return Err(MessageError::PathNotFound(rendered()));
                        }
                        steps.push(Step::Child(candidates[0]));
                        steps.push(Step::Child(i));
                        node = &items[i];
                    } else if i == 0 {
                        steps.push(Step::Child(candidates[0]));
                        node = only;
                    } else {
                        return Err(MessageError::PathNotFound(rendered()));
                    }
                }
                (_, None) => return Err(MessageError::AmbiguousPath(rendered())),
                (n, Some(Index::At(i))) => {
                    if i >= n {
                        return Err(MessageError::PathNotFound(rendered()));
                    }
                    steps.push(Step::Child(candidates[i]));
                    node = &children[candidates[i]];
                }
                (_, Some(Index::Any)) => unreachable!("wildcards rejected above"),
            }
        }
        Ok(steps)
    }

    pub fn get(&self, path: &FieldPath) -> Result<&FieldNode, MessageError> {
        let steps = self.locate(path)?;
        let mut node = &self.root;
        for Step::Child(i) in steps {
            node = &node.value.nodes().expect("located container")[i];
        }
        Ok(node)
    }

    pub(crate) fn get_mut(&mut self, path: &FieldPath) -> Result<&mut FieldNode, MessageError> {
        let steps = self.locate(path)?;
        Ok(self.node_mut_by_steps(&steps))
    }

    /// Index of the addressed node inside its parent's child/item vector.
    pub(crate) fn position_in_parent(&self, path: &FieldPath) -> Result<usize, MessageError> {
        let steps = self.locate(path)?;
        match steps.last() {
            Some(Step::Child(i)) => Ok(*i),
            None => Err(MessageError::InvalidPath {
                path: String::new(),
                reason: "root has no parent".into(),
            }),
        }
    }

    /// Parent node of the addressed node (list items resolve to the list).
    pub(crate) fn parent_of(&self, path: &FieldPath) -> Result<&FieldNode, MessageError> {
        let mut steps = self.locate(path)?;
        steps.pop();
        let mut node = &self.root;
        for Step::Child(i) in steps {
            node = &node.value.nodes().expect("located container")[i];
        }
        Ok(node)
    }

    pub fn get_str(&self, path: &str) -> Result<&FieldNode, MessageError> {
        self.get(&FieldPath::parse(path)?)
    }

    fn node_mut_by_steps(&mut self, steps: &[Step]) -> &mut FieldNode {
        let mut node = &mut self.root;
        for Step::Child(i) in steps {
            node = &mut node.value.nodes_mut().expect("located container")[*i];
        }
        node
    }

    fn mutated(&self) -> Message {
        let mut out = self.clone();
        out.root.strip_meta();
        out
    }

    /// Insert `node` under `parent`; `position: None` appends.
    pub fn insert_at(
        &self,
        parent: &FieldPath,
        position: Option<usize>,
        node: FieldNode,
    ) -> Result<Message, MessageError> {
        if !is_valid_name(&node.name) {
            return Err(MessageError::Invalid(format!(
                "invalid node name {:?}",
                node.name
            )));
        }
        let steps = self.locate(parent)?;
        let mut out = self.mutated();
        let target = out.node_mut_by_steps(&steps);
        let kind = target.value.kind();
        let nodes = target
            .value
            .nodes_mut()
            .ok_or_else(|| MessageError::TypeMismatch {
                path: parent.to_string(),
                reason: format!("cannot insert into a {kind} field"),
            })?;
        let len = nodes.len();
        let pos = position.unwrap_or(len);
        if pos > len {
            return Err(MessageError::PositionOutOfRange {
                path: parent.to_string(),
                position: pos,
                len,
            });
        }
        let mut node = node;
        node.strip_meta();
        nodes.insert(pos, node);
        Ok(out)
    }

    pub fn remove_at(&self, path: &FieldPath) -> Result<Message, MessageError> {
        if path.is_root() {
            return Err(MessageError::InvalidPath {
                path: String::new(),
                reason: "cannot remove the root".into(),
            });
        }
        let mut steps = self.locate(path)?;
        let Some(Step::Child(idx)) = steps.pop() else {
            unreachable!()
        };
        let mut out = self.mutated();
        let parent = out.node_mut_by_steps(&steps);
        parent
            .value
            .nodes_mut()
            .expect("located container")
            .remove(idx);
        Ok(out)
    }

    pub fn update_at(&self, path: &FieldPath, value: FieldValue) -> Result<Message, MessageError> {
        let steps = self.locate(path)?;
        let mut out = self.mutated();
        let target = out.node_mut_by_steps(&steps);
        let mismatch = |reason: String| MessageError::TypeMismatch {
            path: path.to_string(),
            reason,
        };
        let new_value = match (&target.value, value) {
            (FieldValue::Uint { bits, .. }, FieldValue::Uint { value, .. }) => {
                if !uint_fits(*bits, value) {
                    return Err(mismatch(format!("value {value} does not fit {bits} bits")));
                }
                FieldValue::Uint { bits: *bits, value }
            }
            (FieldValue::Bytes { .. }, v @ FieldValue::Bytes { .. })
            | (FieldValue::Text { .. }, v @ FieldValue::Text { .. })
            | (FieldValue::Composite { .. }, v @ FieldValue::Composite { .. })
            | (FieldValue::List { .. }, v @ FieldValue::List { .. }) => v,
            (old, new) => {
                return Err(mismatch(format!(
                    "cannot replace {} with {}",
                    old.kind(),
                    new.kind()
                )));
            }
        };
        target.value = new_value;
        target.strip_meta();
        Ok(out)
    }

    /// Path a node would have after being inserted at `position` under `parent`.
    pub fn inserted_path(
        &self,
        parent: &FieldPath,
        position: Option<usize>,
        name: &str,
    ) -> Result<FieldPath, MessageError> {
        let node = self.get(parent)?;
        match &node.value {
            FieldValue::List { items } => {
                let pos = position.unwrap_or(items.len());
                Ok(parent.with_last_index(Some(Index::At(pos))))
            }
            FieldValue::Composite { children } => {
                let pos = position.unwrap_or(children.len());
                let before = children[..pos.min(children.len())]
                    .iter()
                    .filter(|c| c.name == name)
                    .count();
                let total = children.iter().filter(|c| c.name == name).count() + 1;
                if total > 1 {
                    Ok(parent.child(Segment::indexed(name, before)))
                } else {
                    Ok(parent.child(Segment::named(name)))
                }
            }
            other => Err(MessageError::TypeMismatch {
                path: parent.to_string(),
                reason: format!("{} has no children", other.kind()),
            }),
        }
    }
}

fn walk_nodes<'a>(
    node: &'a FieldNode,
    path: &FieldPath,
    out: &mut Vec<(FieldPath, &'a FieldNode)>,
) {
    match &node.value {
        FieldValue::Composite { children } => {
            for (seg, child) in child_segments(children).into_iter().zip(children) {
                let p = path.child(seg);
                out.push((p.clone(), child));
                walk_nodes(child, &p, out);
            }
        }
        FieldValue::List { items } => {
            for (i, item) in items.iter().enumerate() {
                let p = path.with_last_index(Some(Index::At(i)));
                out.push((p.clone(), item));
                walk_nodes(item, &p, out);
            }
        }
        _ => {}
    }
}

fn collect_paths(node: &FieldNode, path: &FieldPath, out: &mut Vec<FieldPath>) {
    let mut pairs = Vec::new();
    walk_nodes(node, path, &mut pairs);
    out.extend(pairs.into_iter().map(|(p, _)| p));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(name: &str, v: u64) -> FieldNode {
        FieldNode::new(name, FieldValue::uint(16, v))
    }

    fn sample() -> Message {
        let ext = |t: u64| {
            FieldNode::new(
                "ext",
                FieldValue::composite(vec![
                    leaf("type", t),
                    FieldNode::derived("length", FieldValue::uint(16, 1)),
                    FieldNode::new("data", FieldValue::bytes(vec![t as u8])),
                ]),
            )
        };
        let root = FieldNode::new(
            "tls",
            FieldValue::composite(vec![FieldNode::new(
                "handshake",
                FieldValue::composite(vec![
                    leaf("version", 0x0303),
                    FieldNode::new(
                        "extensions",
                        FieldValue::list(vec![ext(0), ext(10), ext(43)]),
                    ),
                ]),
            )]),
        );
        Message::new(
            ProtocolId::Tls13,
            "ClientHello with Supported Versions Extension",
            root,
        )
    }

    #[test]
    fn list_items_are_indexed() {
        let m = sample();
        let paths: Vec<String> = m.field_paths().iter().map(|p| p.to_string()).collect();
        assert!(paths.contains(&"handshake.extensions[0].type".to_string()));
        assert!(paths.contains(&"handshake.extensions[2].data".to_string()));
        assert_eq!(
            m.get_str("handshake.extensions[1]")
                .unwrap()
                .child_uint("type"),
            Some(10)
        );
    }

    #[test]
    fn single_leaf_paths() {
        let m = Message::new(
            ProtocolId::Dns,
            "DNS Query",
            FieldNode::new("dns", FieldValue::composite(vec![leaf("id", 1)])),
        );
        let paths: Vec<String> = m.field_paths().iter().map(|p| p.to_string()).collect();
        assert_eq!(paths, vec!["id"]);
    }

    #[test]
    fn get_errors() {
        let m = sample();
        assert!(matches!(
            m.get_str("nosuch"),
            Err(MessageError::PathNotFound(_))
        ));
        assert!(matches!(
            m.get_str("handshake.extensions[9]"),
            Err(MessageError::PathNotFound(_))
        ));
        assert!(matches!(
            m.get_str("handshake.extensions[*]"),
            Err(MessageError::AmbiguousPath(_))
        ));
    }

    #[test]
    fn repeated_siblings_need_index() {
        let root = FieldNode::new(
            "http",
            FieldValue::composite(vec![FieldNode::new(
                "headers",
                FieldValue::composite(vec![
                    FieldNode::new("Accept", FieldValue::text("a")),
                    FieldNode::new("Host", FieldValue::text("h")),
                    FieldNode::new("Accept", FieldValue::text("b")),
                ]),
            )]),
        );
        let m = Message::new(ProtocolId::Http1, "http request with Accept header", root);
        assert!(matches!(
            m.get_str("headers.Accept"),
            Err(MessageError::AmbiguousPath(_))
        ));
        assert_eq!(
            m.get_str("headers.Accept[1]").unwrap().value.as_text(),
            Some("b")
        );
        assert_eq!(
            m.get_str("headers.Host").unwrap().value.as_text(),
            Some("h")
        );
        let paths: Vec<String> = m.field_paths().iter().map(|p| p.to_string()).collect();
        assert_eq!(
            paths,
            vec![
                "headers",
                "headers.Accept[0]",
                "headers.Host",
                "headers.Accept[1]"
            ]
        );
    }

    #[test]
    fn insert_appends_when_position_absent() {
        let m = sample();
        let parent = FieldPath::parse("handshake").unwrap();
        let out = m.insert_at(&parent, None, leaf("extra", 7)).unwrap();
        assert_eq!(
            out.get_str("handshake").unwrap().children()[2].name,
            "extra"
        );
        assert!(matches!(
            m.insert_at(&parent, Some(5), leaf("x", 0)),
            Err(MessageError::PositionOutOfRange { .. })
        ));
    }

    #[test]
    fn remove_then_get_fails_and_source_untouched() {
        let m = sample();
        let before = m.clone();
        let p = FieldPath::parse("handshake.version").unwrap();
        let out = m.remove_at(&p).unwrap();
        assert!(matches!(out.get(&p), Err(MessageError::PathNotFound(_))));
        assert_eq!(m, before);
        assert!(m.get(&p).is_ok());
    }

    #[test]
    fn update_type_checks() {
        let m = sample();
        let p = FieldPath::parse("handshake.extensions[0]").unwrap();
        assert!(matches!(
            m.update_at(&p, FieldValue::uint(8, 1)),
            Err(MessageError::TypeMismatch { .. })
        ));
        let v = FieldPath::parse("handshake.version").unwrap();
        assert!(matches!(
            m.update_at(&v, FieldValue::uint(32, 1 << 20)),
            Err(MessageError::TypeMismatch { .. })
        ));
        let out = m.update_at(&v, FieldValue::uint(32, 0x0304)).unwrap();
        assert_eq!(out.get(&v).unwrap().value, FieldValue::uint(16, 0x0304));
    }

    #[test]
    fn insert_remove_inverse() {
        let m = sample();
        let parent = FieldPath::parse("handshake.extensions").unwrap();
        let node = FieldNode::new("ext", FieldValue::composite(vec![leaf("type", 99)]));
        let at = m.inserted_path(&parent, Some(1), &node.name).unwrap();
        let grown = m.insert_at(&parent, Some(1), node).unwrap();
        assert_eq!(grown.remove_at(&at).unwrap(), m);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let m = sample();
        let text = m.to_json_pretty();
        assert!(text.contains("\"kind\": \"list\""));
        assert_eq!(Message::from_json(&text).unwrap(), m);
        let bad = text.replacen("\"value\": 771", "\"value\": 99999999", 1);
        assert!(Message::from_json(&bad).is_err());
    }
}

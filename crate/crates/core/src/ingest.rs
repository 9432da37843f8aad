//! Seed corpus construction from tshark `-T json -x` exports and raw fixtures.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::codec::{self, tls, CodecError};
use crate::message::{Message, ProtocolId};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("not a tshark JSON export: {0}")]
    NotTsharkJson(String),
    #[error("no frame matched the configured message types ({skipped} skipped)")]
    NoMatchingFrames { skipped: usize },
    #[error("no seed for message type {0:?}")]
    NoSeedForType(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("{path}: {source}")]
    Codec { path: String, source: CodecError },
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("unknown message type {0:?}")]
    UnknownType(String),
}

fn io_err(path: &Path, e: impl ToString) -> IngestError {
    IngestError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageTypeSpec {
    pub protocol: ProtocolId,
    pub name: String,
}

/// The configured message-type list L.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageTypeList {
    pub types: Vec<MessageTypeSpec>,
}

impl MessageTypeList {
    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| io_err(path, e))
    }

    pub fn names(&self) -> Vec<&str> {
        self.types.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.types.iter().any(|t| t.name == name)
    }

    pub fn protocol_of(&self, name: &str) -> Option<ProtocolId> {
        self.types
            .iter()
            .find(|t| t.name == name)
            .map(|t| t.protocol)
    }

    pub fn for_protocol(&self, p: ProtocolId) -> Vec<&str> {
        self.types
            .iter()
            .filter(|t| t.protocol == p)
            .map(|t| t.name.as_str())
            .collect()
    }

    pub fn subset(&self, names: &[&str]) -> MessageTypeList {
        MessageTypeList {
            types: self
                .types
                .iter()
                .filter(|t| names.contains(&t.name.as_str()))
                .cloned()
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSource {
    pub file: String,
    /// Frame number within a capture; absent for raw fixtures.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frame: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedEntry {
    pub message_type: String,
    pub seed: Message,
    /// Bytes the seed was decoded from.
    pub wire: Vec<u8>,
    pub source: SeedSource,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SeedCorpus {
    pub entries: Vec<SeedEntry>,
    /// Frames that matched no configured type.
    pub skipped: usize,
}

/// What a tshark frame looks like to type matching.
enum Dissection<'a> {
    Dns { response: bool },
    TlsClientHello { ext_types: Vec<u16> },
    HttpRequest { layer: &'a Value },
    Other,
}

fn find_all<'a>(v: &'a Value, key: &str, out: &mut Vec<&'a Value>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                if k == key {
                    out.push(child);
                }
                find_all(child, key, out);
            }
        }
        Value::Array(items) => items.iter().for_each(|i| find_all(i, key, out)),
        _ => {}
    }
}

fn values_of<'a>(v: &'a Value, key: &str) -> Vec<&'a str> {
    let mut hits = Vec::new();
    find_all(v, key, &mut hits);
    let mut out = Vec::new();
    for h in hits {
        match h {
            Value::String(s) => out.push(s.as_str()),
            Value::Array(items) => out.extend(items.iter().filter_map(|i| i.as_str())),
            _ => {}
        }
    }
    out
}

fn has_key(v: &Value, key: &str) -> bool {
    let mut hits = Vec::new();
    find_all(v, key, &mut hits);
    !hits.is_empty()
}

fn dissect(layers: &Value) -> (Dissection<'_>, Option<(ProtocolId, &'static str)>) {
    if let Some(dns) = layers.get("dns") {
        let response = values_of(dns, "dns.flags.response")
            .first()
            .is_some_and(|v| *v == "1" || *v == "True");
        return (
            Dissection::Dns { response },
            Some((ProtocolId::Dns, "dns_raw")),
        );
    }
    if let Some(t) = layers.get("tls") {
        if values_of(t, "tls.handshake.type").contains(&"1") {
            let ext_types = values_of(t, "tls.handshake.extension.type")
                .iter()
                .filter_map(|s| s.parse().ok())
                .collect();
            return (
                Dissection::TlsClientHello { ext_types },
                Some((ProtocolId::Tls13, "tls_raw")),
            );
        }
        return (Dissection::Other, None);
    }
    if let Some(h) = layers.get("http") {
        if has_key(h, "http.request.method") {
            return (
                Dissection::HttpRequest { layer: h },
                Some((ProtocolId::Http1, "http_raw")),
            );
        }
    }
    (Dissection::Other, None)
}

/// Header token of an HTTP type name ("http request with Host header" -> "Host").
fn http_type_header(type_name: &str) -> Option<&str> {
    type_name
        .strip_prefix("http request with ")?
        .strip_suffix(" header")
}

/// Extension code named by a TLS type ("ClientHello with Key Share Extension").
/// `Some(None)` is the no-extension type.
fn tls_type_extension(type_name: &str) -> Option<Option<String>> {
    let mid = type_name
        .strip_prefix("ClientHello with ")?
        .strip_suffix(" Extension")?;
    if mid == "No" {
        return Some(None);
    }
    Some(Some(mid.to_ascii_lowercase().replace(' ', "_")))
}

fn tshark_http_field(header: &str) -> String {
    if header.starts_with("http.") {
        return header.to_string();
    }
    let lower = header.to_ascii_lowercase().replace('-', "_");
    if lower == "content_length" {
        "http.content_length_header".to_string()
    } else {
        format!("http.{lower}")
    }
}

fn dissection_matches(d: &Dissection<'_>, type_name: &str) -> bool {
    match d {
        Dissection::Dns { response } => {
            type_name
                == if *response {
                    "DNS Response"
                } else {
                    "DNS Query"
                }
        }
        Dissection::TlsClientHello { ext_types } => match tls_type_extension(type_name) {
            Some(None) => ext_types.is_empty(),
            Some(Some(name)) => ext_types.iter().any(|c| tls::extension_name(*c) == name),
            None => false,
        },
        Dissection::HttpRequest { layer } => match http_type_header(type_name) {
            Some(h) => has_key(layer, &tshark_http_field(h)),
            None => false,
        },
        Dissection::Other => false,
    }
}

/// Does a decoded message belong to `type_name`? Works on the field tree,
/// independently of any dissector output.
pub fn message_matches_type(msg: &Message, type_name: &str) -> bool {
    match msg.protocol {
        ProtocolId::Dns => {
            let qr = msg
                .get_str("header.flags.qr")
                .ok()
                .and_then(|n| n.value.as_uint());
            match type_name {
                "DNS Query" => qr == Some(0),
                "DNS Response" => qr == Some(1),
                _ => false,
            }
        }
        ProtocolId::Tls13 => {
            if msg
                .get_str("handshake.msg_type")
                .ok()
                .and_then(|n| n.value.as_uint())
                != Some(tls::HS_CLIENT_HELLO)
            {
                return false;
            }
            let names: Vec<String> = msg
                .get_str("handshake.extensions")
                .map(|e| e.children().iter().map(|c| c.name.clone()).collect())
                .unwrap_or_default();
            match tls_type_extension(type_name) {
                Some(None) => names.is_empty(),
                Some(Some(name)) => names.contains(&name),
                None => false,
            }
        }
        ProtocolId::Http1 => {
            if msg.get_str("request_line").is_err() {
                return false;
            }
            match http_type_header(type_name) {
                Some("request.line") => true,
                Some(h) => {
                    let want = h.strip_prefix("http.").unwrap_or(h).replace('_', "-");
                    codec::http::header_pairs(&msg.root)
                        .iter()
                        .any(|(n, _)| n.trim().eq_ignore_ascii_case(&want))
                }
                None => false,
            }
        }
        ProtocolId::Ipv6 => false,
    }
}

fn layer_bytes(layers: &Value, raw_key: &str) -> Option<Vec<u8>> {
    let raw = layers.get(raw_key)?;
    let hex_str = match raw {
        Value::Array(items) => items.first()?.as_str()?,
        Value::String(s) => s.as_str(),
        _ => return None,
    };
    hex::decode(hex_str).ok()
}

/// Ingest a tshark JSON export. Frames are type-matched on the dissector
/// tree, then their raw protocol bytes are decoded through the codecs.
pub fn ingest_tshark_json(
    doc: &Value,
    types: &MessageTypeList,
    file: &str,
) -> Result<SeedCorpus, IngestError> {
    let frames = doc
        .as_array()
        .ok_or_else(|| IngestError::NotTsharkJson("top level is not an array".into()))?;
    let mut corpus = SeedCorpus::default();
    for (idx, frame) in frames.iter().enumerate() {
        let layers = frame
            .get("_source")
            .and_then(|s| s.get("layers"))
            .ok_or_else(|| {
                IngestError::NotTsharkJson(format!("frame {idx} has no _source.layers"))
            })?;
        let (dissection, target) = dissect(layers);
        let matched: Vec<&MessageTypeSpec> = types
            .types
            .iter()
            .filter(|t| dissection_matches(&dissection, &t.name))
            .collect();
        let Some((protocol, raw_key)) = target.filter(|_| !matched.is_empty()) else {
            corpus.skipped += 1;
            continue;
        };
        let Some(bytes) = layer_bytes(layers, raw_key) else {
            log::warn!("frame {idx}: no {raw_key}; export with -x");
            corpus.skipped += 1;
            continue;
        };
        let msg = match codec::decode(protocol, &matched[0].name, &bytes) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("frame {idx}: {e}");
                corpus.skipped += 1;
                continue;
            }
        };
        for t in matched {
            let mut seed = msg.clone();
            seed.message_type = t.name.clone();
            corpus.entries.push(SeedEntry {
                message_type: t.name.clone(),
                seed,
                wire: bytes.clone(),
                source: SeedSource {
                    file: file.to_string(),
                    frame: Some(idx),
                },
            });
        }
    }
    if corpus.entries.is_empty() {
        return Err(IngestError::NoMatchingFrames {
            skipped: corpus.skipped,
        });
    }
    log::info!(
        "tshark ingest: {} seeds, {} frames skipped",
        corpus.entries.len(),
        corpus.skipped
    );
    Ok(corpus)
}

pub fn ingest_raw(
    path: &Path,
    protocol: ProtocolId,
    message_type: &str,
) -> Result<SeedEntry, IngestError> {
    let wrap = |source| IngestError::Codec {
        path: path.display().to_string(),
        source,
    };
    let bytes = codec::load_fixture(path).map_err(wrap)?;
    let seed = codec::decode(protocol, message_type, &bytes).map_err(wrap)?;
    Ok(SeedEntry {
        message_type: message_type.to_string(),
        seed,
        wire: bytes,
        source: SeedSource {
            file: path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            frame: None,
        },
    })
}

pub fn select_seed<'c>(
    corpus: &'c SeedCorpus,
    message_type: &str,
) -> Result<&'c Message, IngestError> {
    if corpus.entries.is_empty() {
        return Err(IngestError::EmptyCorpus);
    }
    corpus
        .entries
        .iter()
        .find(|e| e.message_type == message_type)
        .map(|e| &e.seed)
        .ok_or_else(|| IngestError::NoSeedForType(message_type.to_string()))
}

#[derive(Debug, Clone, Deserialize)]
struct RawIndexEntry {
    file: String,
    protocol: ProtocolId,
    message_types: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
struct SeedIndex {
    #[serde(default)]
    raw: Vec<RawIndexEntry>,
    #[serde(default)]
    tshark: Vec<String>,
}

impl SeedCorpus {
    /// Load a seed directory described by its `index.json`: raw fixtures
    /// first, in listed order, then tshark captures. Types outside `types`
    /// are ignored.
    pub fn load_dir(dir: &Path, types: &MessageTypeList) -> Result<SeedCorpus, IngestError> {
        let index_path = dir.join("index.json");
        let text = fs::read_to_string(&index_path).map_err(|e| io_err(&index_path, e))?;
        let index: SeedIndex = serde_json::from_str(&text).map_err(|e| io_err(&index_path, e))?;
        let mut corpus = SeedCorpus::default();
        for entry in &index.raw {
            for t in entry.message_types.iter().filter(|t| types.contains(t)) {
                corpus
                    .entries
                    .push(ingest_raw(&dir.join(&entry.file), entry.protocol, t)?);
            }
        }
        for cap in &index.tshark {
            let path: PathBuf = dir.join(cap);
            let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            let doc: Value = serde_json::from_str(&text)
                .map_err(|e| IngestError::NotTsharkJson(e.to_string()))?;
            match ingest_tshark_json(&doc, types, cap) {
                Ok(c) => {
                    corpus.skipped += c.skipped;
                    corpus.entries.extend(c.entries);
                }
                Err(IngestError::NoMatchingFrames { skipped }) => corpus.skipped += skipped,
                Err(e) => return Err(e),
            }
        }
        Ok(corpus)
    }

    pub fn counts_by_type(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.message_type.clone()).or_insert(0) += 1;
        }
        out
    }

    /// Configured types with no seed.
    pub fn missing_types<'t>(&self, types: &'t MessageTypeList) -> Vec<&'t str> {
        types
            .names()
            .into_iter()
            .filter(|t| !self.entries.iter().any(|e| e.message_type == *t))
            .collect()
    }
}

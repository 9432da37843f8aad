//! HTTP/1.1 messages, kept at the byte level.
//!
//! Header lines split into `name` (raw bytes before the colon, including any
//! whitespace), `sep` (the colon and following OWS), `value` and `eol`, so
//! odd spellings survive a round trip. Header composites are named after the
//! trimmed header name. `Content-Length` is a derived integer only when its
//! value is canonical decimal equal to the body size; chunked bodies are
//! split into chunks when their framing is canonical.

use super::{child_paths, CodecError, CodecSchema, DerivedRule, Recompute, Source};
use crate::message::{FieldNode, FieldValue, ProtocolId};
use crate::path::{FieldPath, Index};

pub(super) fn schema() -> CodecSchema {
    CodecSchema {
        protocol: ProtocolId::Http1,
        derived_rules: vec![
            DerivedRule::new(
                "headers.Content-Length[*].value",
                Recompute::EncodedLength(Source::Path("body")),
            ),
            DerivedRule::new(
                "body.chunks[*].size",
                Recompute::EncodedLength(Source::Sibling("data")),
            ),
        ],
        case_insensitive_names: true,
    }
}

fn text(name: &str, t: &[u8]) -> Result<FieldNode, CodecError> {
    let s = std::str::from_utf8(t)
        .map_err(|_| CodecError::malformed(format!("{name} is not UTF-8")))?;
    Ok(FieldNode::new(name, FieldValue::text(s)))
}

struct Line<'a> {
    content: &'a [u8],
    eol: &'a [u8],
}

fn next_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<Line<'a>> {
    let rest = &bytes[*pos..];
    let nl = rest.iter().position(|b| *b == b'\n')?;
    let (content, eol) = if nl > 0 && rest[nl - 1] == b'\r' {
        (&rest[..nl - 1], &rest[nl - 1..=nl])
    } else {
        (&rest[..nl], &rest[nl..=nl])
    };
    *pos += nl + 1;
    Some(Line { content, eol })
}

fn split_token(s: &[u8]) -> (&[u8], &[u8], &[u8]) {
    let end = s.iter().position(|b| *b == b' ').unwrap_or(s.len());
    let spaces = s[end..].iter().take_while(|b| **b == b' ').count();
    (&s[..end], &s[end..end + spaces], &s[end + spaces..])
}

/// Node name for a header: trimmed, with path metacharacters replaced.
pub fn header_node_name(raw: &str) -> String {
    let t = raw.trim_matches([' ', '\t']);
    let cleaned: String = t
        .chars()
        .map(|c| if matches!(c, '.' | '[' | ']') { '_' } else { c })
        .collect();
    if cleaned.is_empty() {
        "header".to_string()
    } else {
        cleaned
    }
}

pub(super) fn decode(bytes: &[u8]) -> Result<FieldNode, CodecError> {
    let mut pos = 0;
    let start = next_line(bytes, &mut pos)
        .ok_or_else(|| CodecError::malformed("no line terminator in start line"))?;
    let start_node = if start.content.starts_with(b"HTTP/") {
        let (version, sp1, rest) = split_token(start.content);
        let (status, sp2, reason) = split_token(rest);
        if sp1.is_empty() || status.is_empty() {
            return Err(CodecError::malformed(
                "status line needs a version and a status code",
            ));
        }
        FieldNode::new(
            "status_line",
            FieldValue::composite(vec![
                text("version", version)?,
                text("sp1", sp1)?,
                text("status", status)?,
                text("sp2", sp2)?,
                text("reason", reason)?,
                text("eol", start.eol)?,
            ]),
        )
    } else {
        let (method, sp1, rest) = split_token(start.content);
        let (target, sp2, version) = split_token(rest);
        if method.is_empty()
            || sp1.is_empty()
            || target.is_empty()
            || sp2.is_empty()
            || version.is_empty()
            || version.contains(&b' ')
        {
            return Err(CodecError::malformed(
                "request line is not method SP target SP version",
            ));
        }
        FieldNode::new(
            "request_line",
            FieldValue::composite(vec![
                text("method", method)?,
                text("sp1", sp1)?,
                text("target", target)?,
                text("sp2", sp2)?,
                text("version", version)?,
                text("eol", start.eol)?,
            ]),
        )
    };

    let mut raw_headers = Vec::new();
    let head_end = loop {
        let line = next_line(bytes, &mut pos)
            .ok_or_else(|| CodecError::malformed("header section is not terminated"))?;
        if line.content.is_empty() {
            break line.eol;
        }
        if matches!(line.content[0], b' ' | b'\t') {
            return Err(CodecError::malformed("obsolete line folding"));
        }
        let colon = line
            .content
            .iter()
            .position(|b| *b == b':')
            .ok_or_else(|| CodecError::malformed("header line without a colon"))?;
        let ows = line.content[colon + 1..]
            .iter()
            .take_while(|b| matches!(b, b' ' | b'\t'))
            .count();
        raw_headers.push((
            &line.content[..colon],
            &line.content[colon..colon + 1 + ows],
            &line.content[colon + 1 + ows..],
            line.eol,
        ));
    };
    let body = &bytes[pos..];

    let chunked = raw_headers.iter().any(|(n, _, v, _)| {
        trim(n).eq_ignore_ascii_case(b"transfer-encoding")
            && std::str::from_utf8(v)
                .map(|v| {
                    v.rsplit(',')
                        .next()
                        .unwrap_or("")
                        .trim()
                        .eq_ignore_ascii_case("chunked")
                })
                .unwrap_or(false)
    });
    let body_node = if chunked {
        decode_chunked(body)
            .unwrap_or_else(|| FieldNode::new("body", FieldValue::bytes(body.to_vec())))
    } else {
        FieldNode::new("body", FieldValue::bytes(body.to_vec()))
    };

    let mut headers = Vec::new();
    for (name, sep, value, eol) in raw_headers {
        let name_s = std::str::from_utf8(name)
            .map_err(|_| CodecError::malformed("header name is not UTF-8"))?;
        let is_cl = trim(name).eq_ignore_ascii_case(b"content-length");
        let value_node = match std::str::from_utf8(value)
            .ok()
            .filter(|_| is_cl)
            .and_then(canonical_decimal)
        {
            Some(v) if v == body.len() as u64 => {
                FieldNode::derived("value", FieldValue::uint(64, v))
            }
            _ => text("value", value)?,
        };
        headers.push(FieldNode::new(
            header_node_name(name_s),
            FieldValue::composite(vec![
                text("name", name)?,
                text("sep", sep)?,
                value_node,
                text("eol", eol)?,
            ]),
        ));
    }
    Ok(FieldNode::new(
        "http",
        FieldValue::composite(vec![
            start_node,
            FieldNode::new("headers", FieldValue::composite(headers)),
            text("head_end", head_end)?,
            body_node,
        ]),
    ))
}

fn trim(b: &[u8]) -> &[u8] {
    let s = b
        .iter()
        .position(|c| !matches!(c, b' ' | b'\t'))
        .unwrap_or(b.len());
    let e = b
        .iter()
        .rposition(|c| !matches!(c, b' ' | b'\t'))
        .map_or(s, |i| i + 1);
    &b[s..e]
}

fn canonical_decimal(s: &str) -> Option<u64> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || (s.len() > 1 && s.starts_with('0'))
    {
        return None;
    }
    s.parse().ok()
}

fn decode_chunked(body: &[u8]) -> Option<FieldNode> {
    let mut pos = 0;
    let mut chunks = Vec::new();
    loop {
        let line = next_line(body, &mut pos)?;
        if line.eol != b"\r\n" {
            return None;
        }
        let size_s = std::str::from_utf8(line.content).ok()?;
        if size_s.is_empty()
            || !size_s
                .bytes()
                .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
        {
            return None;
        }
        let size = u64::from_str_radix(size_s, 16).ok()?;
        if format!("{size:x}") != size_s {
            return None;
        }
        if size == 0 {
            let trailer = std::str::from_utf8(&body[pos..]).ok()?;
            if !trailer.ends_with("\r\n") {
                return None;
            }
            return Some(FieldNode::new(
                "body",
                FieldValue::composite(vec![
                    FieldNode::new("chunks", FieldValue::list(chunks)),
                    FieldNode::new("last_chunk", FieldValue::text("0\r\n")),
                    FieldNode::new("trailer", FieldValue::text(trailer)),
                ]),
            ));
        }
        let data = body.get(pos..pos + size as usize)?;
        pos += size as usize;
        if body.get(pos..pos + 2)? != b"\r\n" {
            return None;
        }
        pos += 2;
        chunks.push(FieldNode::new(
            "chunk",
            FieldValue::composite(vec![
                FieldNode::derived("size", FieldValue::uint(64, size)),
                FieldNode::new("size_eol", FieldValue::text("\r\n")),
                FieldNode::new("data", FieldValue::bytes(data.to_vec())),
                FieldNode::new("data_eol", FieldValue::text("\r\n")),
            ]),
        ));
    }
}

fn is_chunk_size(path: &FieldPath) -> bool {
    let segs = path.segments();
    segs.len() >= 2 && segs[segs.len() - 1].name == "size" && segs[segs.len() - 2].name == "chunks"
}

fn check_text(path: &FieldPath, t: &str) -> Result<(), CodecError> {
    let segs = path.segments();
    let Some(last) = segs.last() else {
        return Ok(());
    };
    let section = segs[0].name.as_str();
    let bad = |why: &str| Err(CodecError::unencodable(path, why.to_string()));
    let is_eol = |s: &str| s == "\r\n" || s == "\n";
    match (section, last.name.as_str()) {
        ("headers", "name") => {
            if t.is_empty() {
                return bad("empty header name");
            }
            if t.contains(['\r', '\n', ':']) {
                return bad("header name contains CR, LF or ':'");
            }
        }
        ("headers", "sep") => {
            if !t.starts_with(':') || !t[1..].chars().all(|c| c == ' ' || c == '\t') {
                return bad("separator must be ':' followed by optional whitespace");
            }
        }
        ("headers", "value") => {
            if t.contains(['\r', '\n']) {
                return bad("header value contains CR or LF");
            }
        }
        ("headers" | "request_line" | "status_line", "eol") | ("head_end", _) => {
            if !is_eol(t) {
                return bad("line terminator must be CRLF or LF");
            }
        }
        ("request_line", "method" | "target" | "version")
        | ("status_line", "version" | "status") => {
            if t.is_empty() || t.contains([' ', '\r', '\n']) {
                return bad("start-line token must be non-empty without SP, CR or LF");
            }
        }
        ("request_line", "sp1" | "sp2") | ("status_line", "sp1") => {
            if t.is_empty() || !t.chars().all(|c| c == ' ') {
                return bad("start-line separator must be one or more spaces");
            }
        }
        ("status_line", "reason") if t.contains(['\r', '\n']) => {
            return bad("reason phrase contains CR or LF");
        }
        _ => {}
    }
    Ok(())
}

fn write(node: &FieldNode, path: &FieldPath, out: &mut Vec<u8>) -> Result<(), CodecError> {
    match &node.value {
        FieldValue::Text { text } => {
            check_text(path, text)?;
            out.extend_from_slice(text.as_bytes());
        }
        FieldValue::Bytes { hex } => out.extend_from_slice(hex),
        FieldValue::Uint { value, .. } => {
            let rendered = if is_chunk_size(path) {
                format!("{value:x}")
            } else {
                value.to_string()
            };
            out.extend_from_slice(rendered.as_bytes());
        }
        FieldValue::Composite { children } => {
            for (p, c) in child_paths(path, children) {
                write(c, &p, out)?;
            }
        }
        FieldValue::List { items } => {
            for (i, item) in items.iter().enumerate() {
                write(item, &path.with_last_index(Some(Index::At(i))), out)?;
            }
        }
    }
    Ok(())
}

pub(super) fn encode_subtree(node: &FieldNode, path: &FieldPath) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::new();
    write(node, path, &mut out)?;
    Ok(out)
}

pub(super) fn encode_message(root: &FieldNode) -> Result<Vec<u8>, CodecError> {
    encode_subtree(root, &FieldPath::root())
}

/// Build one header composite with `: ` and CRLF.
pub fn header(name: &str, value: &str) -> FieldNode {
    FieldNode::new(
        header_node_name(name),
        FieldValue::composite(vec![
            FieldNode::new("name", FieldValue::text(name)),
            FieldNode::new("sep", FieldValue::text(": ")),
            FieldNode::new("value", FieldValue::text(value)),
            FieldNode::new("eol", FieldValue::text("\r\n")),
        ]),
    )
}

/// Raw `(name, value)` pairs of a decoded tree, names untrimmed.
pub fn header_pairs(root: &FieldNode) -> Vec<(String, String)> {
    let Some(headers) = root.child("headers") else {
        return Vec::new();
    };
    headers
        .children()
        .iter()
        .map(|h| {
            let get = |n: &str| match h.child(n).map(|c| &c.value) {
                Some(FieldValue::Text { text }) => text.clone(),
                Some(FieldValue::Uint { value, .. }) => value.to_string(),
                _ => String::new(),
            };
            (get("name"), get("value"))
        })
        .collect()
}

/// Status code from the first line of a response stream.
pub fn status_code(bytes: &[u8]) -> Option<u16> {
    let line_end = bytes
        .iter()
        .position(|b| *b == b'\n')
        .unwrap_or(bytes.len());
    let line = std::str::from_utf8(&bytes[..line_end]).ok()?;
    let mut parts = line.split(' ').filter(|s| !s.is_empty());
    if !parts.next()?.starts_with("HTTP/") {
        return None;
    }
    let code = parts.next()?.trim();
    if code.len() != 3 {
        return None;
    }
    code.parse().ok()
}

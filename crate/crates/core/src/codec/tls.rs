//! TLS plaintext records carrying a ClientHello, ServerHello or Alert.
//!
//! One record per message. Extensions decode to opaque `type`/`length`/`data`
//! items named after the extension; unknown codes become `ext_0x....`.

use super::{
    write_binary, BitWriter, CodecError, CodecSchema, DerivedRule, Reader, Recompute, Source,
};
use crate::message::{FieldNode, FieldValue, ProtocolId};
use crate::path::FieldPath;

pub const CONTENT_HANDSHAKE: u64 = 22;
pub const CONTENT_ALERT: u64 = 21;
pub const HS_CLIENT_HELLO: u64 = 1;
pub const HS_SERVER_HELLO: u64 = 2;

const EXTENSION_NAMES: [(u16, &str); 23] = [
    (0, "server_name"),
    (5, "status_request"),
    (10, "supported_groups"),
    (11, "ec_point_formats"),
    (13, "signature_algorithms"),
    (16, "application_layer_protocol_negotiation"),
    (18, "signed_certificate_timestamp"),
    (21, "padding"),
    (23, "extended_master_secret"),
    (27, "compress_certificate"),
    (35, "session_ticket"),
    (41, "pre_shared_key"),
    (42, "early_data"),
    (43, "supported_versions"),
    (44, "cookie"),
    (45, "psk_key_exchange_modes"),
    (47, "certificate_authorities"),
    (49, "post_handshake_auth"),
    (50, "signature_algorithms_cert"),
    (51, "key_share"),
    (17513, "application_settings"),
    (65037, "encrypted_client_hello"),
    (65281, "renegotiation_info"),
];

/// GREASE code points (RFC 8701) use the 0x?a?a pattern.
pub fn is_grease(code: u16) -> bool {
    code & 0x0f0f == 0x0a0a && (code >> 8) == (code & 0xff)
}

pub fn extension_name(code: u16) -> String {
    if is_grease(code) {
        return "reserved".to_string();
    }
    EXTENSION_NAMES
        .iter()
        .find(|(c, _)| *c == code)
        .map(|(_, n)| n.to_string())
        .unwrap_or_else(|| format!("ext_0x{code:04x}"))
}

pub fn extension_code(name: &str) -> Option<u16> {
    if let Some(hex) = name.strip_prefix("ext_0x") {
        return u16::from_str_radix(hex, 16).ok();
    }
    if name == "reserved" {
        return Some(0x0a0a);
    }
    EXTENSION_NAMES
        .iter()
        .find(|(_, n)| *n == name)
        .map(|(c, _)| *c)
}

pub(super) fn schema() -> CodecSchema {
    let rules = vec![
        DerivedRule::new(
            "record.length",
            Recompute::EncodedLength(Source::ParentFollowingSiblings),
        ),
        DerivedRule::new(
            "handshake.length",
            Recompute::EncodedLength(Source::FollowingSiblings),
        ),
        DerivedRule::new(
            "handshake.session_id_length",
            Recompute::EncodedLength(Source::Sibling("session_id")),
        ),
        DerivedRule::new(
            "handshake.cipher_suites_length",
            Recompute::EncodedLength(Source::Sibling("cipher_suites")),
        ),
        DerivedRule::new(
            "handshake.compression_methods_length",
            Recompute::EncodedLength(Source::Sibling("compression_methods")),
        ),
        DerivedRule::new(
            "handshake.extensions_length",
            Recompute::EncodedLength(Source::Sibling("extensions")),
        ),
        DerivedRule::new(
            "handshake.extensions[*].length",
            Recompute::EncodedLength(Source::Sibling("data")),
        ),
    ];
    CodecSchema {
        protocol: ProtocolId::Tls13,
        derived_rules: rules,
        case_insensitive_names: false,
    }
}

fn uint_node(r: &mut Reader<'_>, name: &str, bytes: usize) -> Result<FieldNode, CodecError> {
    let off = r.pos();
    let v = r.uint(bytes, name)?;
    Ok(FieldNode::new(name, FieldValue::uint((bytes * 8) as u8, v)).with_meta(off, bytes))
}

fn length_node(
    r: &mut Reader<'_>,
    name: &str,
    bytes: usize,
) -> Result<(FieldNode, usize), CodecError> {
    let mut n = uint_node(r, name, bytes)?;
    n.derived = true;
    let v = n.value.as_uint().unwrap_or(0) as usize;
    Ok((n, v))
}

fn bytes_node(r: &mut Reader<'_>, name: &str, len: usize) -> Result<FieldNode, CodecError> {
    let off = r.pos();
    let b = r.take(len, name)?;
    Ok(FieldNode::new(name, FieldValue::bytes(b.to_vec())).with_meta(off, len))
}

pub(super) fn decode(bytes: &[u8]) -> Result<FieldNode, CodecError> {
    let mut r = Reader::new(bytes);
    let content_type = uint_node(&mut r, "content_type", 1)?;
    let version = uint_node(&mut r, "legacy_version", 2)?;
    let (length, body_len) = length_node(&mut r, "length", 2)?;
    let ct = content_type.value.as_uint().unwrap_or(0);
    let record = FieldNode::new(
        "record",
        FieldValue::composite(vec![content_type, version, length]),
    )
    .with_meta(0, 5);
    if r.remaining() != body_len {
        return Err(CodecError::malformed(format!(
            "record length {body_len} but {} bytes follow the header",
            r.remaining()
        )));
    }
    let body = r.take(body_len, "record body")?;
    let mut br = Reader::new(body);
    let payload = match ct {
        CONTENT_HANDSHAKE => decode_handshake(&mut br)?,
        CONTENT_ALERT => {
            let level = uint_node(&mut br, "level", 1)?;
            let description = uint_node(&mut br, "description", 1)?;
            if br.remaining() != 0 {
                return Err(CodecError::malformed("alert longer than 2 bytes"));
            }
            FieldNode::new("alert", FieldValue::composite(vec![level, description]))
        }
        other => {
            return Err(CodecError::malformed(format!(
                "unsupported record content type {other}"
            )))
        }
    };
    Ok(FieldNode::new(
        "tls",
        FieldValue::composite(vec![record, shift_meta(payload, 5)]),
    )
    .with_meta(0, bytes.len()))
}

fn shift_meta(mut node: FieldNode, by: usize) -> FieldNode {
    if let Some(m) = node.meta.as_mut() {
        m.offset += by;
    }
    if let FieldValue::Composite { children } | FieldValue::List { items: children } =
        &mut node.value
    {
        let taken = std::mem::take(children);
        *children = taken.into_iter().map(|c| shift_meta(c, by)).collect();
    }
    node
}

fn decode_handshake(r: &mut Reader<'_>) -> Result<FieldNode, CodecError> {
    let msg_type = uint_node(r, "msg_type", 1)?;
    let (length, hs_len) = length_node(r, "length", 3)?;
    if r.remaining() != hs_len {
        return Err(CodecError::malformed(format!(
            "handshake length {hs_len} but record carries {} bytes",
            r.remaining()
        )));
    }
    let mut children = vec![msg_type.clone(), length];
    match msg_type.value.as_uint() {
        Some(HS_CLIENT_HELLO) => {
            children.push(uint_node(r, "legacy_version", 2)?);
            children.push(bytes_node(r, "random", 32)?);
            let (sid_len_node, sid_len) = length_node(r, "session_id_length", 1)?;
            children.push(sid_len_node);
            children.push(bytes_node(r, "session_id", sid_len)?);
            let (cs_len_node, cs_len) = length_node(r, "cipher_suites_length", 2)?;
            if cs_len % 2 != 0 {
                return Err(CodecError::malformed("odd cipher_suites length"));
            }
            children.push(cs_len_node);
            let cs_off = r.pos();
            let mut suites = Vec::new();
            for _ in 0..cs_len / 2 {
                suites.push(uint_node(r, "cipher_suite", 2)?);
            }
            children.push(
                FieldNode::new("cipher_suites", FieldValue::list(suites)).with_meta(cs_off, cs_len),
            );
            let (cm_len_node, cm_len) = length_node(r, "compression_methods_length", 1)?;
            children.push(cm_len_node);
            children.push(bytes_node(r, "compression_methods", cm_len)?);
            if r.remaining() > 0 {
                decode_extensions(r, &mut children)?;
            }
        }
        Some(HS_SERVER_HELLO) => {
            children.push(uint_node(r, "legacy_version", 2)?);
            children.push(bytes_node(r, "random", 32)?);
            let (sid_len_node, sid_len) = length_node(r, "session_id_length", 1)?;
            children.push(sid_len_node);
            children.push(bytes_node(r, "session_id", sid_len)?);
            children.push(uint_node(r, "cipher_suite", 2)?);
            children.push(uint_node(r, "compression_method", 1)?);
            if r.remaining() > 0 {
                decode_extensions(r, &mut children)?;
            }
        }
        _ => {
            let rest = r.remaining();
            children.push(bytes_node(r, "body", rest)?);
        }
    }
    if r.remaining() != 0 {
        return Err(CodecError::malformed(format!(
            "{} bytes after handshake body",
            r.remaining()
        )));
    }
    Ok(FieldNode::new("handshake", FieldValue::composite(children)).with_meta(0, hs_len + 4))
}

fn decode_extensions(r: &mut Reader<'_>, children: &mut Vec<FieldNode>) -> Result<(), CodecError> {
    let (len_node, ext_len) = length_node(r, "extensions_length", 2)?;
    children.push(len_node);
    let off = r.pos();
    let block = r.take(ext_len, "extensions")?;
    let mut er = Reader::new(block);
    let mut items = Vec::new();
    while er.remaining() > 0 {
        let start = er.pos();
        let ty = uint_node(&mut er, "type", 2)?;
        let (len, data_len) = length_node(&mut er, "length", 2)?;
        let data = bytes_node(&mut er, "data", data_len)?;
        let code = ty.value.as_uint().unwrap_or(0) as u16;
        let item = FieldNode::new(
            extension_name(code),
            FieldValue::composite(vec![ty, len, data]),
        )
        .with_meta(start, er.pos() - start);
        items.push(shift_meta(item, off));
    }
    children.push(FieldNode::new("extensions", FieldValue::list(items)).with_meta(off, ext_len));
    Ok(())
}

fn no_text(_: &str, path: &FieldPath, _: &mut BitWriter) -> Result<(), CodecError> {
    Err(CodecError::unencodable(path, "TLS has no text fields"))
}

pub(super) fn encode_subtree(node: &FieldNode, path: &FieldPath) -> Result<Vec<u8>, CodecError> {
    let mut out = BitWriter::new();
    write_binary(node, path, &mut out, &mut no_text)?;
    out.finish()
}

pub(super) fn encode_message(root: &FieldNode) -> Result<Vec<u8>, CodecError> {
    encode_subtree(root, &FieldPath::root())
}

/// A TLS extension item in decoded form, ready for insertion.
pub fn extension(code: u16, data: &[u8]) -> FieldNode {
    FieldNode::new(
        extension_name(code),
        FieldValue::composite(vec![
            FieldNode::new("type", FieldValue::uint(16, u64::from(code))),
            FieldNode::derived("length", FieldValue::uint(16, data.len() as u64)),
            FieldNode::new("data", FieldValue::bytes(data.to_vec())),
        ]),
    )
}

/// Record content type and, for handshakes, the handshake type of the first
/// record in `bytes`. Trailing records are ignored.
pub fn first_record_kind(bytes: &[u8]) -> Option<(u8, Option<u8>)> {
    if bytes.len() < 5 {
        return None;
    }
    let ct = bytes[0];
    if ct == CONTENT_HANDSHAKE as u8 {
        Some((ct, bytes.get(5).copied()))
    } else {
        Some((ct, None))
    }
}

/// Split the first complete record off a stream.
pub fn first_record(bytes: &[u8]) -> Option<&[u8]> {
    if bytes.len() < 5 {
        return None;
    }
    let len = u16::from_be_bytes([bytes[3], bytes[4]]) as usize;
    bytes.get(..5 + len)
}

/// Build an Alert record.
pub fn alert_record(level: u8, description: u8) -> Vec<u8> {
    vec![
        CONTENT_ALERT as u8,
        0x03,
        0x03,
        0x00,
        0x02,
        level,
        description,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{decode as decode_msg, encode, repair_derived};
    use crate::message::Message;

    fn hello(exts: &[(u16, &[u8])]) -> Vec<u8> {
        let mut ext_block = Vec::new();
        for (code, data) in exts {
            ext_block.extend_from_slice(&code.to_be_bytes());
            ext_block.extend_from_slice(&(data.len() as u16).to_be_bytes());
            ext_block.extend_from_slice(data);
        }
        let mut body = vec![0x03, 0x03];
        body.extend_from_slice(&[7u8; 32]);
        body.push(0);
        body.extend_from_slice(&[0, 2, 0x13, 0x01, 1, 0]);
        body.extend_from_slice(&(ext_block.len() as u16).to_be_bytes());
        body.extend_from_slice(&ext_block);
        let mut hs = vec![1, 0, (body.len() >> 8) as u8, body.len() as u8];
        hs.extend_from_slice(&body);
        let mut rec = vec![22, 3, 1, (hs.len() >> 8) as u8, hs.len() as u8];
        rec.extend_from_slice(&hs);
        rec
    }

    #[test]
    fn extensions_decode_in_wire_order() {
        let bytes = hello(&[
            (43, &[2, 3, 4]),
            (51, &[0, 0]),
            (0x1a1a, &[]),
            (41, &[9; 5]),
        ]);
        let m = decode_msg(ProtocolId::Tls13, "ClientHello", &bytes).unwrap();
        let names: Vec<&str> = m
            .get_str("handshake.extensions")
            .unwrap()
            .children()
            .iter()
            .map(|c| c.name.as_str())
            .collect();
        assert_eq!(
            names,
            [
                "supported_versions",
                "key_share",
                "reserved",
                "pre_shared_key"
            ]
        );
        assert_eq!(encode(&m).unwrap().as_slice(), &bytes[..]);
    }

    #[test]
    fn inserted_extension_grows_lengths() {
        let bytes = hello(&[(43, &[2, 3, 4])]);
        let m = decode_msg(ProtocolId::Tls13, "ClientHello", &bytes).unwrap();
        let before = m
            .get_str("handshake.extensions_length")
            .unwrap()
            .value
            .as_uint()
            .unwrap();
        let out = m
            .insert_at(
                &FieldPath::parse("handshake.extensions").unwrap(),
                Some(0),
                extension(0x4242, &[1; 13]),
            )
            .unwrap();
        let fixed = repair_derived(&out).unwrap();
        let after = fixed
            .get_str("handshake.extensions_length")
            .unwrap()
            .value
            .as_uint()
            .unwrap();
        assert_eq!(after, before + 17);
        assert_eq!(
            fixed.get_str("handshake.extensions[0]").unwrap().name,
            "ext_0x4242"
        );
    }

    #[test]
    fn zeroed_record_length_is_repaired() {
        let bytes = hello(&[(43, &[2, 3, 4])]);
        let m = decode_msg(ProtocolId::Tls13, "ClientHello", &bytes).unwrap();
        let z = m
            .update_at(
                &FieldPath::parse("record.length").unwrap(),
                FieldValue::uint(16, 0),
            )
            .unwrap();
        let fixed = repair_derived(&z).unwrap();
        assert_eq!(
            fixed.get_str("record.length").unwrap().value.as_uint(),
            Some(bytes.len() as u64 - 5)
        );
    }

    #[test]
    fn alert_and_server_hello_decode() {
        let a = alert_record(2, 40);
        let m = decode_msg(ProtocolId::Tls13, "Alert", &a).unwrap();
        assert_eq!(
            m.get_str("alert.description").unwrap().value.as_uint(),
            Some(40)
        );
        let mut body = vec![3, 3];
        body.extend_from_slice(&[1; 32]);
        body.extend_from_slice(&[0, 0x13, 0x01, 0, 0, 6, 0, 43, 0, 2, 3, 4]);
        let mut hs = vec![2, 0, 0, body.len() as u8];
        hs.extend_from_slice(&body);
        let mut rec = vec![22, 3, 3, 0, hs.len() as u8];
        rec.extend_from_slice(&hs);
        let m = decode_msg(ProtocolId::Tls13, "ServerHello", &rec).unwrap();
        assert_eq!(
            m.get_str("handshake.cipher_suite").unwrap().value.as_uint(),
            Some(0x1301)
        );
        assert_eq!(encode(&m).unwrap().as_slice(), &rec[..]);
    }

    #[test]
    fn length_mismatch_is_malformed() {
        let mut bytes = hello(&[]);
        bytes.push(0);
        assert!(decode_msg(ProtocolId::Tls13, "ClientHello", &bytes).is_err());
        assert!(decode_msg(ProtocolId::Tls13, "ClientHello", &bytes[..20]).is_err());
    }

    #[test]
    fn grease_and_names() {
        assert!(is_grease(0xdada));
        assert!(!is_grease(0x0a1a));
        assert_eq!(extension_name(0x9999), "ext_0x9999");
        assert_eq!(extension_code("pre_shared_key"), Some(41));
        let _ = Message::new(ProtocolId::Tls13, "x", extension(41, &[]));
    }
}

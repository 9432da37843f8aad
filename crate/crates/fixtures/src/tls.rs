//! TLS 1.3 front end: answers a ClientHello with a ServerHello or an Alert.
//! No key exchange happens.

use std::io::{ErrorKind, Read, Write};
use std::net::TcpStream;
use std::time::{Duration, Instant};

use crate::{BugId, FixtureConfig};

const CT_HANDSHAKE: u8 = 22;
const CT_ALERT: u8 = 21;
const HS_CLIENT_HELLO: u8 = 1;
const HS_SERVER_HELLO: u8 = 2;
const MAX_RECORD: usize = 16384 + 256;

const EXT_PRE_SHARED_KEY: u16 = 41;
const EXT_SUPPORTED_VERSIONS: u16 = 43;
const EXT_PSK_MODES: u16 = 45;

const UNEXPECTED_MESSAGE: u8 = 10;
const RECORD_OVERFLOW: u8 = 22;
const HANDSHAKE_FAILURE: u8 = 40;
const ILLEGAL_PARAMETER: u8 = 47;
const DECODE_ERROR: u8 = 50;
const PROTOCOL_VERSION: u8 = 70;
const MISSING_EXTENSION: u8 = 109;

const IDLE: Duration = Duration::from_millis(1500);

pub struct TlsServer {
    psk_anywhere: bool,
}

#[derive(Debug)]
struct Hello<'a> {
    random: &'a [u8],
    session_id: &'a [u8],
    suites: Vec<u16>,
    compression: &'a [u8],
    extensions: Vec<(u16, &'a [u8])>,
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.data.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(out)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_be_bytes([b[0], b[1]]))
    }

    fn u24(&mut self) -> Option<usize> {
        self.take(3)
            .map(|b| (usize::from(b[0]) << 16) | (usize::from(b[1]) << 8) | usize::from(b[2]))
    }

    fn done(&self) -> bool {
        self.pos == self.data.len()
    }
}

fn parse_hello(body: &[u8]) -> Option<Hello<'_>> {
    let mut c = Cursor { data: body, pos: 0 };
    c.u16()?;
    let random = c.take(32)?;
    let sid_len = usize::from(c.u8()?);
    if sid_len > 32 {
        return None;
    }
    let session_id = c.take(sid_len)?;
    let cs_len = usize::from(c.u16()?);
    if cs_len < 2 || cs_len % 2 != 0 {
        return None;
    }
    let suites = c
        .take(cs_len)?
        .chunks(2)
        .map(|p| u16::from_be_bytes([p[0], p[1]]))
        .collect();
    let comp_len = usize::from(c.u8()?);
    if comp_len == 0 {
        return None;
    }
    let compression = c.take(comp_len)?;
    let mut extensions = Vec::new();
    if !c.done() {
        let ext_len = usize::from(c.u16()?);
        let block = c.take(ext_len)?;
        let mut e = Cursor {
            data: block,
            pos: 0,
        };
        while !e.done() {
            let ty = e.u16()?;
            let len = usize::from(e.u16()?);
            extensions.push((ty, e.take(len)?));
        }
    }
    if !c.done() {
        return None;
    }
    Some(Hello {
        random,
        session_id,
        suites,
        compression,
        extensions,
    })
}

fn alert(desc: u8) -> Vec<u8> {
    vec![CT_ALERT, 0x03, 0x03, 0x00, 0x02, 0x02, desc]
}

fn server_hello(h: &Hello<'_>, suite: u16) -> Vec<u8> {
    let mut body = vec![0x03, 0x03];
    body.extend(h.random.iter().rev().map(|b| b ^ 0x5a));
    body.push(h.session_id.len() as u8);
    body.extend_from_slice(h.session_id);
    body.extend_from_slice(&suite.to_be_bytes());
    body.push(0);
    let ext = [0x00, 0x2b, 0x00, 0x02, 0x03, 0x04];
    body.extend_from_slice(&(ext.len() as u16).to_be_bytes());
    body.extend_from_slice(&ext);
    let mut hs = vec![HS_SERVER_HELLO];
    hs.extend_from_slice(&(body.len() as u32).to_be_bytes()[1..]);
    hs.extend(body);
    let mut rec = vec![CT_HANDSHAKE, 0x03, 0x03];
    rec.extend_from_slice(&(hs.len() as u16).to_be_bytes());
    rec.extend(hs);
    rec
}

impl TlsServer {
    pub fn new(cfg: &FixtureConfig) -> Self {
        TlsServer {
            psk_anywhere: cfg.has(BugId::PskNotLastAccepted),
        }
    }

    /// Reply to one record.
    pub fn respond(&self, record: &[u8]) -> Vec<u8> {
        if record.len() < 5 {
            return alert(DECODE_ERROR);
        }
        let len = usize::from(u16::from_be_bytes([record[3], record[4]]));
        if len > MAX_RECORD {
            return alert(RECORD_OVERFLOW);
        }
        if record[0] != CT_HANDSHAKE {
            return alert(UNEXPECTED_MESSAGE);
        }
        let payload = &record[5..];
        if payload.len() != len || payload.len() < 4 {
            return alert(DECODE_ERROR);
        }
        if payload[0] != HS_CLIENT_HELLO {
            return alert(UNEXPECTED_MESSAGE);
        }
        let mut c = Cursor {
            data: payload,
            pos: 1,
        };
        let hs_len = c.u24().unwrap_or(usize::MAX);
        if hs_len != payload.len() - 4 {
            return alert(DECODE_ERROR);
        }
        let Some(h) = parse_hello(&payload[4..]) else {
            return alert(DECODE_ERROR);
        };
        match self.check(&h) {
            Ok(suite) => server_hello(&h, suite),
            Err(desc) => alert(desc),
        }
    }

    fn check(&self, h: &Hello<'_>) -> Result<u16, u8> {
        if h.compression != [0] {
            return Err(ILLEGAL_PARAMETER);
        }
        let types: Vec<u16> = h.extensions.iter().map(|e| e.0).collect();
        for (i, t) in types.iter().enumerate() {
            if types[..i].contains(t) {
                return Err(ILLEGAL_PARAMETER);
            }
        }
        let versions = h
            .extensions
            .iter()
            .find(|e| e.0 == EXT_SUPPORTED_VERSIONS)
            .map(|e| e.1)
            .ok_or(PROTOCOL_VERSION)?;
        let offers_13 = versions.len() >= 3
            && usize::from(versions[0]) == versions.len() - 1
            && versions[1..].chunks(2).any(|p| p == [0x03, 0x04]);
        if !offers_13 {
            return Err(PROTOCOL_VERSION);
        }
        if let Some(pos) = types.iter().position(|t| *t == EXT_PRE_SHARED_KEY) {
            if pos + 1 != types.len() && !self.psk_anywhere {
                return Err(ILLEGAL_PARAMETER);
            }
            if !types.contains(&EXT_PSK_MODES) {
                return Err(MISSING_EXTENSION);
            }
        }
        h.suites
            .iter()
            .copied()
            .find(|s| (0x1301..=0x1305).contains(s))
            .ok_or(HANDSHAKE_FAILURE)
    }

    pub fn handle(&self, mut stream: TcpStream, stopped: &dyn Fn() -> bool) {
        let start = Instant::now();
        let mut buf = Vec::new();
        let mut chunk = [0u8; 4096];
        let _ = stream.set_read_timeout(Some(Duration::from_millis(50)));
        loop {
            if stopped() || start.elapsed() > IDLE {
                return;
            }
            if buf.len() >= 5 {
                let need = 5 + usize::from(u16::from_be_bytes([buf[3], buf[4]]));
                if need > 5 + MAX_RECORD {
                    let _ = stream.write_all(&alert(RECORD_OVERFLOW));
                    return;
                }
                if buf.len() >= need {
                    buf.truncate(need);
                    break;
                }
            }
            match stream.read(&mut chunk) {
                Ok(0) => return,
                Ok(n) => buf.extend_from_slice(&chunk[..n]),
                Err(e)
                    if matches!(
                        e.kind(),
                        ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted
                    ) => {}
                Err(_) => return,
            }
        }
        let _ = stream.write_all(&self.respond(&buf));
        let _ = stream.flush();
    }
}

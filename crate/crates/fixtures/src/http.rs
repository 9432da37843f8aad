//! HTTP/1.1 origin server: one request per connection.

use std::io::{ErrorKind, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use crate::{BugId, FixtureConfig};

const MAX_HEAD: usize = 16 * 1024;
const MAX_BODY: usize = 1 << 20;
const IDLE: Duration = Duration::from_millis(1000);
/// Unknown Accept-Encoding tokens that trip the simulated crash.
pub const CRASH_CODINGS: usize = 8;

const KNOWN_CODINGS: [&str; 9] = [
    "gzip",
    "x-gzip",
    "deflate",
    "compress",
    "x-compress",
    "br",
    "zstd",
    "identity",
    "*",
];
const METHODS: [&str; 9] = [
    "GET", "HEAD", "POST", "PUT", "DELETE", "OPTIONS", "PATCH", "TRACE", "CONNECT",
];

pub struct HttpServer {
    cl_whitespace: bool,
    crash_sim: bool,
    crashed: AtomicBool,
}

#[derive(Debug, PartialEq, Eq)]
pub enum Reply {
    Status(u16),
    /// Close without answering.
    Crash,
}

fn is_tchar(c: u8) -> bool {
    c.is_ascii_alphanumeric() || b"!#$%&'*+-.^_`|~".contains(&c)
}

fn is_token(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(is_tchar)
}

fn reason(code: u16) -> &'static str {
    match code {
        200 => "OK",
        400 => "Bad Request",
        411 => "Length Required",
        413 => "Content Too Large",
        431 => "Request Header Fields Too Large",
        501 => "Not Implemented",
        505 => "HTTP Version Not Supported",
        _ => "Error",
    }
}

/// What the head says about the body.
enum BodyFraming {
    None,
    Length(usize),
    Chunked,
}

struct Head {
    framing: BodyFraming,
    unknown_codings: usize,
}

fn parse_head(head: &str, cl_whitespace: bool) -> Result<Head, u16> {
    let mut lines = head.split("\r\n");
    let start = lines.next().ok_or(400u16)?;
    let parts: Vec<&str> = start.split(' ').collect();
    if parts.len() != 3 {
        return Err(400);
    }
    let (method, target, version) = (parts[0], parts[1], parts[2]);
    if !is_token(method) {
        return Err(400);
    }
    if version != "HTTP/1.1" && version != "HTTP/1.0" {
        let well_formed =
            version.len() == 8 && version.starts_with("HTTP/") && version.as_bytes()[6] == b'.';
        return Err(if well_formed { 505 } else { 400 });
    }
    if !METHODS.contains(&method) {
        return Err(501);
    }
    let target_ok = target.starts_with('/')
        || (target == "*" && method == "OPTIONS")
        || target.starts_with("http://")
        || (method == "CONNECT" && target.contains(':'));
    if !target_ok || target.bytes().any(|b| b <= b' ' || b == 0x7f) {
        return Err(400);
    }
    let mut hosts = 0;
    let mut lengths: Vec<&str> = Vec::new();
    let mut te: Option<String> = None;
    let mut unknown_codings = 0;
    for line in lines {
        if line.starts_with([' ', '\t']) {
            return Err(400);
        }
        let (raw_name, value) = line.split_once(':').ok_or(400u16)?;
        let name = if raw_name.ends_with([' ', '\t']) {
            let trimmed = raw_name.trim_end_matches([' ', '\t']);
            if !(cl_whitespace && trimmed.eq_ignore_ascii_case("content-length")) {
                return Err(400);
            }
            trimmed
        } else {
            raw_name
        };
        if !is_token(name) {
            return Err(400);
        }
        let value = value.trim_matches([' ', '\t']);
        if value.bytes().any(|b| (b < 0x20 && b != b'\t') || b == 0x7f) {
            return Err(400);
        }
        match name.to_ascii_lowercase().as_str() {
            "host" => hosts += 1,
            "content-length" => lengths.extend(value.split(',').map(|v| v.trim())),
            "transfer-encoding" => {
                let joined = match te.take() {
                    Some(prev) => format!("{prev}, {value}"),
                    None => value.to_string(),
                };
                te = Some(joined);
            }
            "accept-encoding" => {
                unknown_codings += value
                    .split(',')
                    .map(|c| {
                        c.split(';')
                            .next()
                            .unwrap_or("")
                            .trim()
                            .to_ascii_lowercase()
                    })
                    .filter(|c| !c.is_empty() && !KNOWN_CODINGS.contains(&c.as_str()))
                    .count();
            }
            _ => {}
        }
    }
    if version == "HTTP/1.1" && hosts != 1 {
        return Err(400);
    }
    if hosts > 1 {
        return Err(400);
    }
    let framing = match (te, lengths.is_empty()) {
        (Some(_), false) => return Err(400),
        (Some(te), true) => {
            let codings: Vec<String> = te
                .split(',')
                .map(|c| c.trim().to_ascii_lowercase())
                .collect();
            if codings
                .iter()
                .any(|c| !["chunked", "gzip", "deflate", "compress"].contains(&c.as_str()))
            {
                return Err(501);
            }
            if codings.last().map(String::as_str) != Some("chunked")
                || codings.iter().filter(|c| *c == "chunked").count() != 1
            {
                return Err(400);
            }
            BodyFraming::Chunked
        }
        (None, false) => {
            if lengths
                .iter()
                .any(|l| l.is_empty() || !l.bytes().all(|b| b.is_ascii_digit()))
            {
                return Err(400);
            }
            if lengths
                .windows(2)
                .any(|w| w[0].trim_start_matches('0') != w[1].trim_start_matches('0'))
            {
                return Err(400);
            }
            let n: usize = lengths[0].parse().map_err(|_| 413u16)?;
            if n > MAX_BODY {
                return Err(413);
            }
            BodyFraming::Length(n)
        }
        (None, true) => BodyFraming::None,
    };
    Ok(Head {
        framing,
        unknown_codings,
    })
}

/// Length of a complete chunked body at the start of `data`, `Err` when malformed.
fn chunked_len(data: &[u8]) -> Result<Option<usize>, u16> {
    let mut pos = 0;
    loop {
        let Some(eol) = data[pos..].windows(2).position(|w| w == b"\r\n") else {
            return Ok(None);
        };
        let line = std::str::from_utf8(&data[pos..pos + eol]).map_err(|_| 400u16)?;
        let size_text = line
            .split(';')
            .next()
            .unwrap_or("")
            .trim_end_matches([' ', '\t']);
        if size_text.is_empty()
            || !size_text.bytes().all(|b| b.is_ascii_hexdigit())
            || size_text.len() > 8
        {
            return Err(400);
        }
        let size = usize::from_str_radix(size_text, 16).map_err(|_| 400u16)?;
        pos += eol + 2;
        if size == 0 {
            // trailer section ends with an empty line
            loop {
                let Some(eol) = data[pos..].windows(2).position(|w| w == b"\r\n") else {
                    return Ok(None);
                };
                pos += eol + 2;
                if eol == 0 {
                    return Ok(Some(pos));
                }
            }
        }
        if data.len() < pos + size + 2 {
            return Ok(None);
        }
        if &data[pos + size..pos + size + 2] != b"\r\n" {
            return Err(400);
        }
        pos += size + 2;
        if pos > MAX_BODY {
            return Err(413);
        }
    }
}

impl HttpServer {
    pub fn new(cfg: &FixtureConfig) -> Self {
        HttpServer {
            cl_whitespace: cfg.has(BugId::ClWhitespaceAccepted),
            crash_sim: cfg.has(BugId::AcceptEncodingCrashSim),
            crashed: AtomicBool::new(false),
        }
    }

    /// Decide the reply for a buffered request; `None` means more bytes are needed.
    pub fn evaluate(&self, buf: &[u8], idle: bool) -> Option<Reply> {
        let Some(head_end) = buf.windows(4).position(|w| w == b"\r\n\r\n") else {
            if buf.len() > MAX_HEAD {
                return Some(Reply::Status(431));
            }
            return idle.then_some(Reply::Status(400));
        };
        let Ok(head) = std::str::from_utf8(&buf[..head_end]) else {
            return Some(Reply::Status(400));
        };
        let head = match parse_head(head, self.cl_whitespace) {
            Ok(h) => h,
            Err(code) => return Some(Reply::Status(code)),
        };
        let body = &buf[head_end + 4..];
        let complete = match head.framing {
            BodyFraming::None => true,
            BodyFraming::Length(n) => body.len() >= n,
            BodyFraming::Chunked => match chunked_len(body) {
                Ok(found) => found.is_some(),
                Err(code) => return Some(Reply::Status(code)),
            },
        };
        if !complete {
            return idle.then_some(Reply::Status(400));
        }
        if self.crash_sim && head.unknown_codings >= CRASH_CODINGS {
            self.crashed.store(true, Ordering::SeqCst);
            log::warn!(
                "http fixture: simulated crash on {} unknown codings",
                head.unknown_codings
            );
            return Some(Reply::Crash);
        }
        Some(Reply::Status(200))
    }

    pub fn is_crashed(&self) -> bool {
        self.crashed.load(Ordering::SeqCst)
    }

    pub fn render(code: u16, head_only: bool) -> Vec<u8> {
        let body: &[u8] = if code == 200 { b"ok\n" } else { b"" };
        let mut out = format!(
            "HTTP/1.1 {code} {}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
            reason(code),
            body.len()
        )
        .into_bytes();
        if !head_only {
            out.extend_from_slice(body);
        }
        out
    }

    pub fn handle(&self, mut stream: TcpStream, stopped: &dyn Fn() -> bool) {
        if self.is_crashed() {
            let _ = stream.shutdown(Shutdown::Both);
            return;
        }
        let _ = stream.set_read_timeout(Some(Duration::from_millis(50)));
        let mut buf = Vec::new();
        let mut chunk = [0u8; 4096];
        let mut last = Instant::now();
        let reply = loop {
            if stopped() {
                return;
            }
            match stream.read(&mut chunk) {
                Ok(0) => match self.evaluate(&buf, true) {
                    Some(r) if !buf.is_empty() => break r,
                    _ => return,
                },
                Ok(n) => {
                    buf.extend_from_slice(&chunk[..n]);
                    last = Instant::now();
                    if let Some(r) = self.evaluate(&buf, false) {
                        break r;
                    }
                }
                Err(e)
                    if matches!(
                        e.kind(),
                        ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted
                    ) =>
                {
                    if last.elapsed() >= IDLE {
                        if buf.is_empty() {
                            return;
                        }
                        break self.evaluate(&buf, true).unwrap_or(Reply::Status(400));
                    }
                }
                Err(_) => return,
            }
        };
        match reply {
            Reply::Crash => {
                let _ = stream.shutdown(Shutdown::Both);
            }
            Reply::Status(code) => {
                let head_only = buf.starts_with(b"HEAD ");
                let _ = stream.write_all(&Self::render(code, head_only));
                let _ = stream.flush();
                let _ = stream.shutdown(Shutdown::Write);
            }
        }
    }
}

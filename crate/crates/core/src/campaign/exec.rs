//! Socket-level execution of one case.

use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use crate::codec::dns;

use super::{Endpoint, Mode, RawOutcome, Transport};

/// Query name the DNS fixture treats as a cache flush.
pub const FLUSH_NAME: &str = "cache.flush.invalid";
const CLASS_CH: u16 = 3;
const TYPE_TXT: u16 = 16;

/// How a response unit ends on a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Framing {
    /// Two-octet length prefix (DNS over TCP).
    LengthPrefixed,
    /// One TLS record.
    TlsRecord,
    /// HTTP head plus body per Content-Length or chunked encoding.
    Http,
    /// Whatever arrives before the peer closes or the deadline passes.
    UntilClose,
}

fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

fn resolve(ep: &Endpoint) -> Option<SocketAddr> {
    (ep.host.as_str(), ep.port).to_socket_addrs().ok()?.next()
}

fn io_outcome(e: &std::io::Error, timeout: Duration) -> RawOutcome {
    match e.kind() {
        ErrorKind::ConnectionRefused => RawOutcome::ConnectionRefused,
        ErrorKind::WouldBlock | ErrorKind::TimedOut => RawOutcome::Timeout {
            deadline_ms: timeout.as_millis() as u64,
        },
        _ => RawOutcome::ConnectionReset,
    }
}

/// Whether `buf` already holds one complete response unit.
fn unit_complete(framing: Framing, buf: &[u8]) -> bool {
    match framing {
        Framing::LengthPrefixed => {
            buf.len() >= 2 && buf.len() >= 2 + u16::from_be_bytes([buf[0], buf[1]]) as usize
        }
        Framing::TlsRecord => {
            buf.len() >= 5 && buf.len() >= 5 + u16::from_be_bytes([buf[3], buf[4]]) as usize
        }
        Framing::Http => http_complete(buf),
        Framing::UntilClose => false,
    }
}

fn http_complete(buf: &[u8]) -> bool {
    let Some(head_end) = buf.windows(4).position(|w| w == b"\r\n\r\n") else {
        return false;
    };
    let head = String::from_utf8_lossy(&buf[..head_end]).to_ascii_lowercase();
    let body = &buf[head_end + 4..];
    for line in head.split("\r\n").skip(1) {
        let Some((name, value)) = line.split_once(':') else {
            continue;
        };
        match name.trim() {
            "content-length" => {
                return value
                    .trim()
                    .parse::<usize>()
                    .map(|n| body.len() >= n)
                    .unwrap_or(true);
            }
            "transfer-encoding" if value.contains("chunked") => {
                return body.windows(5).any(|w| w == b"0\r\n\r\n");
            }
            _ => {}
        }
    }
    // no framing headers: a response head without a body
    true
}

fn trim_unit(framing: Framing, mut buf: Vec<u8>) -> Vec<u8> {
    let keep = match framing {
        Framing::LengthPrefixed if buf.len() >= 2 => {
            Some(2 + u16::from_be_bytes([buf[0], buf[1]]) as usize)
        }
        Framing::TlsRecord if buf.len() >= 5 => {
            Some(5 + u16::from_be_bytes([buf[3], buf[4]]) as usize)
        }
        _ => None,
    };
    if let Some(k) = keep {
        buf.truncate(k.min(buf.len()));
    }
    if framing == Framing::LengthPrefixed && buf.len() >= 2 {
        buf.drain(..2);
    }
    buf
}

/// Read one response unit from `stream` before `deadline`.
fn read_unit(
    stream: &mut TcpStream,
    framing: Framing,
    start: Instant,
    timeout: Duration,
) -> RawOutcome {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    loop {
        let left = timeout.saturating_sub(start.elapsed());
        if left.is_zero() {
            break;
        }
        if stream.set_read_timeout(Some(left)).is_err() {
            return RawOutcome::ConnectionReset;
        }
        match stream.read(&mut chunk) {
            Ok(0) => break,
            Ok(n) => {
                buf.extend_from_slice(&chunk[..n]);
                if unit_complete(framing, &buf) {
                    return RawOutcome::Bytes {
                        octets: trim_unit(framing, buf),
                        rtt_ms: elapsed_ms(start),
                    };
                }
            }
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) if buf.is_empty() => return io_outcome(&e, timeout),
            Err(_) => break,
        }
    }
    if buf.is_empty() {
        if start.elapsed() >= timeout {
            RawOutcome::Timeout {
                deadline_ms: timeout.as_millis() as u64,
            }
        } else {
            RawOutcome::ConnectionReset
        }
    } else {
        RawOutcome::Bytes {
            octets: trim_unit(framing, buf),
            rtt_ms: elapsed_ms(start),
        }
    }
}

pub fn framing_for(ep: &Endpoint, protocol: crate::message::ProtocolId) -> Framing {
    use crate::message::ProtocolId;
    if ep.tls_like {
        return Framing::TlsRecord;
    }
    match protocol {
        ProtocolId::Dns => Framing::LengthPrefixed,
        ProtocolId::Tls13 => Framing::TlsRecord,
        ProtocolId::Http1 => Framing::Http,
        ProtocolId::Ipv6 => Framing::UntilClose,
    }
}

/// Client mode: fresh connection, send `wire`, read the first response unit.
pub fn send_client(ep: &Endpoint, framing: Framing, wire: &[u8], timeout: Duration) -> RawOutcome {
    let Some(addr) = resolve(ep) else {
        return RawOutcome::ConnectionRefused;
    };
    let start = Instant::now();
    match ep.transport {
        Transport::Udp => udp_exchange(addr, wire, start, timeout),
        Transport::Tcp => {
            let mut stream = match TcpStream::connect_timeout(&addr, timeout) {
                Ok(s) => s,
                Err(e) => return io_outcome(&e, timeout),
            };
            let _ = stream.set_nodelay(true);
            let mut out = Vec::with_capacity(wire.len() + 2);
            if framing == Framing::LengthPrefixed {
                out.extend_from_slice(&(wire.len() as u16).to_be_bytes());
            }
            out.extend_from_slice(wire);
            if let Err(e) = stream.write_all(&out) {
                return io_outcome(&e, timeout);
            }
            read_unit(&mut stream, framing, start, timeout)
        }
    }
}

fn udp_exchange(addr: SocketAddr, wire: &[u8], start: Instant, timeout: Duration) -> RawOutcome {
    let bind: SocketAddr = if addr.is_ipv4() {
        "0.0.0.0:0"
    } else {
        "[::]:0"
    }
    .parse()
    .expect("literal");
    let sock = match UdpSocket::bind(bind).and_then(|s| s.connect(addr).map(|_| s)) {
        Ok(s) => s,
        Err(e) => return io_outcome(&e, timeout),
    };
    if let Err(e) = sock.send(wire) {
        return io_outcome(&e, timeout);
    }
    udp_recv(&sock, start, timeout)
}

fn udp_recv(sock: &UdpSocket, start: Instant, timeout: Duration) -> RawOutcome {
    let mut buf = vec![0u8; 65535];
    loop {
        let left = timeout.saturating_sub(start.elapsed());
        if left.is_zero() {
            return RawOutcome::Timeout {
                deadline_ms: timeout.as_millis() as u64,
            };
        }
        let _ = sock.set_read_timeout(Some(left));
        match sock.recv(&mut buf) {
            Ok(n) => {
                return RawOutcome::Bytes {
                    octets: buf[..n].to_vec(),
                    rtt_ms: elapsed_ms(start),
                }
            }
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return io_outcome(&e, timeout),
        }
    }
}

/// A plain recursive query for `qname`.
pub fn dns_query(id: u16, qname: &str, qtype: u16, qclass: u16) -> Vec<u8> {
    let root = dns::message_root(
        dns::header(
            id,
            dns::DnsFlags {
                rd: true,
                ..Default::default()
            },
        ),
        vec![dns::question(qname, qtype, qclass)],
        vec![],
        vec![],
        vec![],
    );
    let msg = crate::message::Message::new(crate::message::ProtocolId::Dns, "DNS Query", root);
    crate::codec::encode(&msg)
        .expect("query built from valid parts")
        .into_vec()
}

pub fn flush_query(id: u16) -> Vec<u8> {
    dns_query(id, FLUSH_NAME, TYPE_TXT, CLASS_CH)
}

/// Outcome of one DNS responder-mode exchange.
pub struct DnsResponderRun {
    pub trigger: RawOutcome,
    pub follow_up: RawOutcome,
    pub forwarded: usize,
}

/// Responder mode for DNS: flush the resolver cache, trigger a lookup of
/// `question`, answer every forwarded query with `wire` (transaction id
/// patched), then ask the same question again and return that answer.
pub fn dns_responder(
    ep: &Endpoint,
    upstream: &UdpSocket,
    question: (&str, u16, u16),
    wire: &[u8],
    id_base: u16,
    timeout: Duration,
) -> DnsResponderRun {
    let Some(addr) = resolve(ep) else {
        return DnsResponderRun {
            trigger: RawOutcome::ConnectionRefused,
            follow_up: RawOutcome::ConnectionRefused,
            forwarded: 0,
        };
    };
    let _ = udp_exchange(addr, &flush_query(id_base), Instant::now(), timeout);
    let stop = AtomicBool::new(false);
    let mut forwarded = 0usize;
    let (trigger, follow_up) = std::thread::scope(|s| {
        let answering = s.spawn(|| {
            let mut count = 0;
            let mut buf = vec![0u8; 65535];
            let _ = upstream.set_read_timeout(Some(Duration::from_millis(20)));
            while !stop.load(Ordering::SeqCst) {
                if let Ok((n, from)) = upstream.recv_from(&mut buf) {
                    if n < 2 {
                        continue;
                    }
                    let mut reply = wire.to_vec();
                    if reply.len() >= 2 {
                        reply[..2].copy_from_slice(&buf[..2]);
                    }
                    let _ = upstream.send_to(&reply, from);
                    count += 1;
                }
            }
            count
        });
        let (qname, qtype, qclass) = question;
        let trigger = udp_exchange(
            addr,
            &dns_query(id_base.wrapping_add(1), qname, qtype, qclass),
            Instant::now(),
            timeout,
        );
        let follow_up = udp_exchange(
            addr,
            &dns_query(id_base.wrapping_add(2), qname, qtype, qclass),
            Instant::now(),
            timeout,
        );
        stop.store(true, Ordering::SeqCst);
        forwarded = answering.join().unwrap_or(0);
        (trigger, follow_up)
    });
    DnsResponderRun {
        trigger,
        follow_up,
        forwarded,
    }
}

/// Responder mode over TCP: accept one peer, read its request, answer with
/// `wire`, then capture whatever the peer sends next.
pub fn tcp_responder(
    listener: &TcpListener,
    framing: Framing,
    wire: &[u8],
    timeout: Duration,
) -> RawOutcome {
    let start = Instant::now();
    let _ = listener.set_nonblocking(true);
    let mut stream = loop {
        match listener.accept() {
            Ok((s, _)) => break s,
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                if start.elapsed() >= timeout {
                    return RawOutcome::Timeout {
                        deadline_ms: timeout.as_millis() as u64,
                    };
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return io_outcome(&e, timeout),
        }
    };
    let _ = stream.set_nonblocking(false);
    match read_unit(&mut stream, framing, start, timeout) {
        RawOutcome::Bytes { .. } => {}
        other => return other,
    }
    if let Err(e) = stream.write_all(wire) {
        return io_outcome(&e, timeout);
    }
    read_unit(&mut stream, Framing::UntilClose, Instant::now(), timeout)
}

pub(super) fn responder_udp(ep: &Endpoint) -> std::io::Result<UdpSocket> {
    let addr = ep.listen.ok_or_else(|| {
        std::io::Error::new(
            ErrorKind::InvalidInput,
            "responder mode needs a listen address",
        )
    })?;
    UdpSocket::bind(addr)
}

pub(super) fn responder_tcp(ep: &Endpoint) -> std::io::Result<TcpListener> {
    let addr = ep.listen.ok_or_else(|| {
        std::io::Error::new(
            ErrorKind::InvalidInput,
            "responder mode needs a listen address",
        )
    })?;
    TcpListener::bind(addr)
}

pub(super) fn is_responder(ep: &Endpoint) -> bool {
    ep.mode == Mode::Responder
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::message::ProtocolId;

    fn ep(port: u16, transport: Transport) -> Endpoint {
        Endpoint {
            host: "127.0.0.1".into(),
            port,
            transport,
            mode: Mode::Client,
            tls_like: false,
            listen: None,
        }
    }

    #[test]
    fn refused_when_port_closed() {
        let port = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().port()
        };
        let out = send_client(
            &ep(port, Transport::Tcp),
            Framing::Http,
            b"GET / HTTP/1.1\r\n\r\n",
            Duration::from_millis(500),
        );
        assert_eq!(out, RawOutcome::ConnectionRefused);
    }

    #[test]
    fn silent_peer_times_out_at_deadline() {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let port = l.local_addr().unwrap().port();
        let hold = std::thread::spawn(move || {
            let (s, _) = l.accept().unwrap();
            std::thread::sleep(Duration::from_millis(600));
            drop(s);
        });
        let start = Instant::now();
        let out = send_client(
            &ep(port, Transport::Tcp),
            Framing::Http,
            b"GET / HTTP/1.1\r\n\r\n",
            Duration::from_millis(300),
        );
        let took = start.elapsed().as_millis() as i64;
        assert_eq!(out, RawOutcome::Timeout { deadline_ms: 300 });
        assert!((took - 300).abs() <= 50, "took {took}ms");
        hold.join().unwrap();
    }

    #[test]
    fn http_unit_stops_at_content_length() {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let port = l.local_addr().unwrap().port();
        let srv = std::thread::spawn(move || {
            let (mut s, _) = l.accept().unwrap();
            let mut b = [0u8; 64];
            let _ = s.read(&mut b).unwrap();
            s.write_all(b"HTTP/1.1 200 OK\r\nContent-Length: 2\r\n\r\nok")
                .unwrap();
            std::thread::sleep(Duration::from_millis(300));
        });
        let out = send_client(
            &ep(port, Transport::Tcp),
            framing_for(&ep(port, Transport::Tcp), ProtocolId::Http1),
            b"GET / HTTP/1.1\r\n\r\n",
            Duration::from_secs(2),
        );
        match out {
            RawOutcome::Bytes { octets, rtt_ms } => {
                assert!(octets.ends_with(b"ok"));
                assert!(rtt_ms < 250);
            }
            other => panic!("{other:?}"),
        }
        srv.join().unwrap();
    }

    #[test]
    fn close_without_reply_is_reset() {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let port = l.local_addr().unwrap().port();
        let srv = std::thread::spawn(move || {
            let (mut s, _) = l.accept().unwrap();
            let mut b = [0u8; 64];
            let _ = s.read(&mut b);
        });
        let out = send_client(
            &ep(port, Transport::Tcp),
            Framing::Http,
            b"GET / HTTP/1.1\r\n\r\n",
            Duration::from_secs(2),
        );
        assert_eq!(out, RawOutcome::ConnectionReset);
        srv.join().unwrap();
    }

    #[test]
    fn udp_round_trip() {
        let s = UdpSocket::bind("127.0.0.1:0").unwrap();
        let port = s.local_addr().unwrap().port();
        let srv = std::thread::spawn(move || {
            let mut b = [0u8; 512];
            let (n, from) = s.recv_from(&mut b).unwrap();
            s.send_to(&b[..n], from).unwrap();
        });
        let q = dns_query(7, "www.example.com", 1, 1);
        let out = send_client(
            &ep(port, Transport::Udp),
            Framing::LengthPrefixed,
            &q,
            Duration::from_secs(2),
        );
        assert!(matches!(out, RawOutcome::Bytes { ref octets, .. } if *octets == q));
        srv.join().unwrap();
    }
}

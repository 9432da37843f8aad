use std::io::{Read, Write};
use std::net::{TcpStream, UdpSocket};
use std::time::{Duration, Instant};

use semfuzz_core::message::ProtocolId;
use semfuzz_fixtures::{serve, BugId, FixtureConfig, FixtureError};

fn http_get(port: u16, req: &[u8]) -> Vec<u8> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(3))).unwrap();
    s.write_all(req).unwrap();
    let mut out = Vec::new();
    let _ = s.read_to_end(&mut out);
    out
}

#[test]
fn restart_on_same_port() {
    let mut a = serve(FixtureConfig::new(ProtocolId::Http1)).unwrap();
    let port = a.port();
    a.shutdown();
    let b = serve(FixtureConfig::new(ProtocolId::Http1).with_port(port)).unwrap();
    assert_eq!(b.port(), port);
    let reply = http_get(port, b"GET / HTTP/1.1\r\nHost: x\r\n\r\n");
    assert!(reply.starts_with(b"HTTP/1.1 200"));
}

#[test]
fn double_shutdown_is_noop() {
    let mut h = serve(FixtureConfig::new(ProtocolId::Tls13)).unwrap();
    h.shutdown();
    h.shutdown();
}

#[test]
fn port_in_use() {
    let a = serve(FixtureConfig::new(ProtocolId::Http1)).unwrap();
    let r = serve(FixtureConfig::new(ProtocolId::Http1).with_port(a.port()));
    assert!(matches!(r, Err(FixtureError::PortInUse(p)) if p == a.port()));
    let d = serve(FixtureConfig::new(ProtocolId::Dns)).unwrap();
    let r = serve(FixtureConfig::new(ProtocolId::Dns).with_port(d.port()));
    assert!(matches!(r, Err(FixtureError::PortInUse(_))));
}

#[test]
fn shutdown_under_concurrent_clients_is_fast() {
    for protocol in [ProtocolId::Http1, ProtocolId::Tls13] {
        let mut h = serve(FixtureConfig::new(protocol)).unwrap();
        let port = h.port();
        // half-sent requests keep every connection open inside the fixture
        let clients: Vec<TcpStream> = (0..8)
            .map(|_| {
                let mut s = TcpStream::connect(("127.0.0.1", port)).unwrap();
                s.write_all(b"\x16\x03").unwrap();
                s
            })
            .collect();
        std::thread::sleep(Duration::from_millis(100));
        let start = Instant::now();
        h.shutdown();
        assert!(
            start.elapsed() <= Duration::from_secs(1),
            "{protocol}: {:?}",
            start.elapsed()
        );
        assert!(TcpStream::connect(("127.0.0.1", port)).is_err());
        drop(clients);
    }
}

#[test]
fn crash_sim_persists_across_connections() {
    let h = serve(FixtureConfig::new(ProtocolId::Http1).with_bug(BugId::AcceptEncodingCrashSim))
        .unwrap();
    let codings = (0..8)
        .map(|i| format!("x-c{i}"))
        .collect::<Vec<_>>()
        .join(",");
    let crash = format!("GET / HTTP/1.1\r\nHost: x\r\nAccept-Encoding: {codings}\r\n\r\n");
    assert!(http_get(h.port(), crash.as_bytes()).is_empty());
    assert!(http_get(h.port(), b"GET / HTTP/1.1\r\nHost: x\r\n\r\n").is_empty());
}

#[test]
fn dns_answers_over_udp() {
    let h = serve(FixtureConfig::new(ProtocolId::Dns)).unwrap();
    let sock = UdpSocket::bind("127.0.0.1:0").unwrap();
    sock.set_read_timeout(Some(Duration::from_secs(2))).unwrap();
    let q =
        hex::decode("12340100000100000000000003777777076578616d706c6503636f6d0000010001").unwrap();
    sock.send_to(&q, h.local_addr()).unwrap();
    let mut buf = [0u8; 512];
    let n = sock.recv(&mut buf).unwrap();
    assert_eq!(&buf[..2], &[0x12, 0x34]);
    assert_eq!(buf[3] & 0x0f, 0);
    assert_eq!(u16::from_be_bytes([buf[6], buf[7]]), 1);
    assert_eq!(&buf[n - 4..n], &[93, 184, 216, 34]);
}

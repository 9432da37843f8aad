use semfuzz_core::campaign::{classify, verify, ClassifyContext, RawOutcome, Status};
use semfuzz_core::message::ProtocolId;
use semfuzz_core::strategy::FeedbackClass::{self, Error, Normal};

fn name(n: &str) -> Vec<u8> {
    let mut out = Vec::new();
    for label in n.split('.') {
        out.push(label.len() as u8);
        out.extend_from_slice(label.as_bytes());
    }
    out.push(0);
    out
}

fn dns(qr: bool, rcode: u8, question: &str, owners: &[&str]) -> Vec<u8> {
    let mut m = vec![
        0x12,
        0x34,
        if qr { 0x81 } else { 0x01 },
        0x80 | rcode,
        0,
        1,
        0,
        owners.len() as u8,
        0,
        0,
        0,
        0,
    ];
    m.extend(name(question));
    m.extend([0, 1, 0, 1]);
    for o in owners {
        m.extend(name(o));
        m.extend([0, 1, 0, 1, 0, 0, 0x0e, 0x10, 0, 4, 192, 0, 2, 1]);
    }
    m
}

fn bytes(b: &[u8]) -> RawOutcome {
    RawOutcome::Bytes {
        octets: b.to_vec(),
        rtt_ms: 1,
    }
}

fn no_response() -> [RawOutcome; 3] {
    [
        RawOutcome::Timeout { deadline_ms: 2000 },
        RawOutcome::ConnectionRefused,
        RawOutcome::ConnectionReset,
    ]
}

fn class(p: ProtocolId, o: &RawOutcome, question: Option<&str>) -> FeedbackClass {
    let ctx = ClassifyContext {
        question: question.map(str::to_string),
    };
    classify(p, o, &ctx).0
}

#[test]
fn dns_rows() {
    let q = Some("www.example.com");
    let rows: Vec<(&str, Vec<u8>, FeedbackClass)> = vec![
        (
            "exact answer",
            dns(true, 0, "www.example.com", &["www.example.com"]),
            Normal,
        ),
        (
            "two exact answers",
            dns(
                true,
                0,
                "www.example.com",
                &["www.example.com", "WWW.example.com"],
            ),
            Normal,
        ),
        ("empty answer", dns(true, 0, "www.example.com", &[]), Normal),
        (
            "unrelated record",
            dns(
                true,
                0,
                "www.example.com",
                &["www.example.com", "evil.example"],
            ),
            Error,
        ),
        (
            "only unrelated",
            dns(true, 0, "www.example.com", &["evil.example"]),
            Error,
        ),
        ("nxdomain", dns(true, 3, "www.example.com", &[]), Error),
        ("formerr", dns(true, 1, "www.example.com", &[]), Error),
        ("servfail", dns(true, 2, "www.example.com", &[]), Error),
        (
            "not a response",
            dns(false, 0, "www.example.com", &[]),
            Error,
        ),
        ("truncated header", vec![0x12, 0x34, 0x81], Error),
    ];
    for (label, wire, want) in rows {
        assert_eq!(class(ProtocolId::Dns, &bytes(&wire), q), want, "{label}");
    }
    // The question carried in the response is used when the context has none.
    let evil = dns(true, 0, "www.example.com", &["evil.example"]);
    assert_eq!(class(ProtocolId::Dns, &bytes(&evil), None), Error);
    for o in no_response() {
        assert_eq!(class(ProtocolId::Dns, &o, q), Error, "{o:?}");
    }
}

#[test]
fn tls_rows() {
    let server_hello = [0x16, 0x03, 0x03, 0x00, 0x04, 0x02, 0x00, 0x00, 0x00];
    let alert = [0x15, 0x03, 0x03, 0x00, 0x02, 0x02, 0x2f];
    let warning_alert = [0x15, 0x03, 0x03, 0x00, 0x02, 0x01, 0x00];
    let other_handshake = [0x16, 0x03, 0x03, 0x00, 0x04, 0x0b, 0x00, 0x00, 0x00];
    let app_data = [0x17, 0x03, 0x03, 0x00, 0x01, 0x00];
    let rows: [(&str, &[u8], FeedbackClass); 6] = [
        ("ServerHello", &server_hello, Normal),
        ("fatal Alert", &alert, Error),
        ("warning Alert", &warning_alert, Error),
        ("Certificate first", &other_handshake, Error),
        ("application data", &app_data, Error),
        ("garbage", b"HTTP/1.1 400 Bad Request\r\n\r\n", Error),
    ];
    for (label, wire, want) in rows {
        assert_eq!(
            class(ProtocolId::Tls13, &bytes(wire), None),
            want,
            "{label}"
        );
    }
    for o in no_response() {
        assert_eq!(class(ProtocolId::Tls13, &o, None), Error, "{o:?}");
    }
}

#[test]
fn http_rows() {
    let rows: [(&str, FeedbackClass); 8] = [
        ("HTTP/1.1 200 OK\r\nContent-Length: 0\r\n\r\n", Normal),
        ("HTTP/1.1 204 No Content\r\n\r\n", Normal),
        ("HTTP/1.0 200 OK\r\n\r\n", Normal),
        ("HTTP/1.1 301 Moved Permanently\r\n\r\n", Error),
        ("HTTP/1.1 400 Bad Request\r\n\r\n", Error),
        ("HTTP/1.1 404 Not Found\r\n\r\n", Error),
        ("HTTP/1.1 500 Internal Server Error\r\n\r\n", Error),
        ("\x16\x03\x03\x00\x02\x02\x2f", Error),
    ];
    for (wire, want) in rows {
        assert_eq!(
            class(ProtocolId::Http1, &bytes(wire.as_bytes()), None),
            want,
            "{wire:?}"
        );
    }
    for o in no_response() {
        assert_eq!(class(ProtocolId::Http1, &o, None), Error, "{o:?}");
    }
}

#[test]
fn ipv6_rows() {
    let mut echo_reply = vec![0x60, 0, 0, 0, 0, 8, 58, 64];
    echo_reply.extend([0u8; 32]);
    echo_reply.extend([129, 0, 0, 0, 0, 0, 0, 0]);
    let mut param_problem = echo_reply.clone();
    param_problem[40] = 4;
    assert_eq!(class(ProtocolId::Ipv6, &bytes(&echo_reply), None), Normal);
    assert_eq!(class(ProtocolId::Ipv6, &bytes(&param_problem), None), Error);
    assert_eq!(
        class(ProtocolId::Ipv6, &bytes(&[0x45, 0, 0, 20]), None),
        Error
    );
    for o in no_response() {
        assert_eq!(class(ProtocolId::Ipv6, &o, None), Error, "{o:?}");
    }
}

#[test]
fn verify_truth_table() {
    let table = [
        (Normal, Normal, Status::Consistent),
        (Normal, Error, Status::PotentialVulnerability),
        (Error, Normal, Status::PotentialVulnerability),
        (Error, Error, Status::Consistent),
    ];
    for (expected, actual, want) in table {
        assert_eq!(verify(expected, actual), want, "{expected:?} vs {actual:?}");
    }
}

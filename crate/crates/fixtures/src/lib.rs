//! Reference servers: RFC-compliant DNS, HTTP/1.1 and TLS 1.3 responders
//! with optional planted bugs, used as campaign targets.

mod dns;
mod http;
mod tls;

use std::collections::BTreeSet;
use std::fmt;
use std::io::ErrorKind;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use semfuzz_core::message::ProtocolId;

pub use dns::{ZONE, ZONE_APEX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BugId {
    PskNotLastAccepted,
    ClWhitespaceAccepted,
    DnsExtraRecordCached,
    AcceptEncodingCrashSim,
}

impl BugId {
    pub const ALL: [BugId; 4] = [
        BugId::PskNotLastAccepted,
        BugId::ClWhitespaceAccepted,
        BugId::DnsExtraRecordCached,
        BugId::AcceptEncodingCrashSim,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BugId::PskNotLastAccepted => "psk-not-last-accepted",
            BugId::ClWhitespaceAccepted => "cl-whitespace-accepted",
            BugId::DnsExtraRecordCached => "dns-extra-record-cached",
            BugId::AcceptEncodingCrashSim => "accept-encoding-crash-sim",
        }
    }

    pub fn parse(text: &str) -> Option<BugId> {
        BugId::ALL.into_iter().find(|b| b.as_str() == text)
    }

    pub fn protocol(self) -> ProtocolId {
        match self {
            BugId::PskNotLastAccepted => ProtocolId::Tls13,
            BugId::ClWhitespaceAccepted | BugId::AcceptEncodingCrashSim => ProtocolId::Http1,
            BugId::DnsExtraRecordCached => ProtocolId::Dns,
        }
    }
}

impl fmt::Display for BugId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixtureConfig {
    pub protocol: ProtocolId,
    pub bugs: BTreeSet<BugId>,
    pub host: String,
    /// 0 picks a free port.
    pub port: u16,
    /// DNS only: forward cache misses here instead of answering from the built-in zone.
    pub upstream: Option<SocketAddr>,
}

impl FixtureConfig {
    pub fn new(protocol: ProtocolId) -> Self {
        FixtureConfig {
            protocol,
            bugs: BTreeSet::new(),
            host: "127.0.0.1".into(),
            port: 0,
            upstream: None,
        }
    }

    pub fn with_bug(mut self, bug: BugId) -> Self {
        self.bugs.insert(bug);
        self
    }

    pub fn with_bugs(mut self, bugs: impl IntoIterator<Item = BugId>) -> Self {
        self.bugs.extend(bugs);
        self
    }

    pub fn with_port(mut self, port: u16) -> Self {
        self.port = port;
        self
    }

    pub fn with_upstream(mut self, upstream: SocketAddr) -> Self {
        self.upstream = Some(upstream);
        self
    }

    pub fn has(&self, bug: BugId) -> bool {
        self.bugs.contains(&bug)
    }
}

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error("bug {bug} does not apply to {protocol}")]
    BugProtocolMismatch { bug: BugId, protocol: ProtocolId },
    #[error("no fixture for {0}")]
    Unsupported(ProtocolId),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// State shared by a listener and its connection threads.
struct Shared {
    stop: AtomicBool,
    streams: Mutex<Vec<TcpStream>>,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

impl Shared {
    fn stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }
}

pub struct FixtureHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    main: Option<JoinHandle<()>>,
}

impl FixtureHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn port(&self) -> u16 {
        self.addr.port()
    }

    /// Stop accepting, close in-flight connections and release the port.
    /// Calling it again does nothing.
    pub fn shutdown(&mut self) {
        let Some(main) = self.main.take() else { return };
        self.shared.stop.store(true, Ordering::SeqCst);
        for s in lock(&self.shared.streams).drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        let _ = main.join();
        let workers: Vec<_> = lock(&self.shared.workers).drain(..).collect();
        for w in workers {
            let _ = w.join();
        }
        log::debug!("fixture on {} stopped", self.addr);
    }
}

impl Drop for FixtureHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn bind_err(e: std::io::Error, port: u16) -> FixtureError {
    if e.kind() == ErrorKind::AddrInUse {
        FixtureError::PortInUse(port)
    } else {
        FixtureError::Io(e)
    }
}

const POLL: Duration = Duration::from_millis(10);

/// Start a fixture; it runs until [`FixtureHandle::shutdown`] or drop.
pub fn serve(cfg: FixtureConfig) -> Result<FixtureHandle, FixtureError> {
    if let Some(bug) = cfg.bugs.iter().find(|b| b.protocol() != cfg.protocol) {
        return Err(FixtureError::BugProtocolMismatch {
            bug: *bug,
            protocol: cfg.protocol,
        });
    }
    let shared = Arc::new(Shared {
        stop: AtomicBool::new(false),
        streams: Mutex::new(Vec::new()),
        workers: Mutex::new(Vec::new()),
    });
    let bind = (cfg.host.as_str(), cfg.port);
    match cfg.protocol {
        ProtocolId::Dns => {
            let sock = UdpSocket::bind(bind).map_err(|e| bind_err(e, cfg.port))?;
            sock.set_read_timeout(Some(POLL))?;
            let addr = sock.local_addr()?;
            let server = Arc::new(dns::DnsServer::new(&cfg));
            let sh = shared.clone();
            let main = std::thread::spawn(move || dns_loop(sock, server, sh));
            log::info!("dns fixture on {addr} bugs={:?}", cfg.bugs);
            Ok(FixtureHandle {
                addr,
                shared,
                main: Some(main),
            })
        }
        ProtocolId::Http1 | ProtocolId::Tls13 => {
            let listener = TcpListener::bind(bind).map_err(|e| bind_err(e, cfg.port))?;
            listener.set_nonblocking(true)?;
            let addr = listener.local_addr()?;
            let handler: Handler = if cfg.protocol == ProtocolId::Http1 {
                let server = Arc::new(http::HttpServer::new(&cfg));
                Arc::new(move |s, sh| server.handle(s, &|| sh.stopped()))
            } else {
                let server = Arc::new(tls::TlsServer::new(&cfg));
                Arc::new(move |s, sh| server.handle(s, &|| sh.stopped()))
            };
            let sh = shared.clone();
            let main = std::thread::spawn(move || tcp_loop(listener, handler, sh));
            log::info!("{} fixture on {addr} bugs={:?}", cfg.protocol, cfg.bugs);
            Ok(FixtureHandle {
                addr,
                shared,
                main: Some(main),
            })
        }
        p => Err(FixtureError::Unsupported(p)),
    }
}

type Handler = Arc<dyn Fn(TcpStream, &Shared) + Send + Sync>;

fn tcp_loop(listener: TcpListener, handler: Handler, shared: Arc<Shared>) {
    while !shared.stopped() {
        match listener.accept() {
            Ok((stream, _)) => {
                let _ = stream.set_nonblocking(false);
                if let Ok(clone) = stream.try_clone() {
                    lock(&shared.streams).push(clone);
                }
                let (h, sh) = (handler.clone(), shared.clone());
                let worker = std::thread::spawn(move || h(stream, &sh));
                let mut workers = lock(&shared.workers);
                workers.retain(|w| !w.is_finished());
                workers.push(worker);
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL),
            Err(e) => {
                log::warn!("accept failed: {e}");
                std::thread::sleep(POLL);
            }
        }
        // drop clones of connections that are already closed
        lock(&shared.streams).retain(|s| s.peer_addr().is_ok());
    }
}

fn dns_loop(sock: UdpSocket, server: Arc<dns::DnsServer>, shared: Arc<Shared>) {
    let sock = Arc::new(sock);
    let mut buf = vec![0u8; 65535];
    while !shared.stopped() {
        let (n, from) = match sock.recv_from(&mut buf) {
            Ok(r) => r,
            Err(e)
                if matches!(
                    e.kind(),
                    ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted
                ) =>
            {
                continue
            }
            Err(e) => {
                log::debug!("dns recv: {e}");
                continue;
            }
        };
        let query = buf[..n].to_vec();
        if server.needs_upstream(&query) {
            let (srv, s, sh) = (server.clone(), sock.clone(), shared.clone());
            let worker = std::thread::spawn(move || {
                if let Some(reply) = srv.handle(&query, &|| sh.stopped()) {
                    let _ = s.send_to(&reply, from);
                }
            });
            let mut workers = lock(&shared.workers);
            workers.retain(|w| !w.is_finished());
            workers.push(worker);
        } else if let Some(reply) = server.handle(&query, &|| shared.stopped()) {
            let _ = sock.send_to(&reply, from);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bug_names_round_trip() {
        for b in BugId::ALL {
            assert_eq!(BugId::parse(b.as_str()), Some(b));
            assert_eq!(serde_json::to_string(&b).unwrap(), format!("\"{b}\""));
        }
    }

    #[test]
    fn bug_must_match_protocol() {
        let r = serve(FixtureConfig::new(ProtocolId::Dns).with_bug(BugId::PskNotLastAccepted));
        assert!(matches!(r, Err(FixtureError::BugProtocolMismatch { .. })));
    }
}

//! UDP timing server and measurement client.
//!
//! The server answers strictly serially: concurrent handling would let one
//! request's cache traffic leak into another's timing.

mod service;
pub mod timer;
pub mod wire;

use std::io::ErrorKind;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use thiserror::Error;

pub use service::{
    Backend, ChannelConfig, EncryptionService, TimingScope, DEFAULT_PACKET_SIZE,
};
use wire::{Request, RequestKind, Response};

use crate::aes::Block;
use crate::attack::{OracleError, TimingOracle};

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("invalid channel config: {0}")]
    Config(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("no response within {0:?}")]
    Timeout(Duration),
    #[error(transparent)]
    Wire(#[from] wire::WireError),
}

impl ChannelError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, ChannelError::Timeout(_))
    }
}

impl From<ChannelError> for OracleError {
    fn from(e: ChannelError) -> Self {
        match e {
            ChannelError::Timeout(_) => OracleError::Timeout,
            ChannelError::Wire(w) => OracleError::Protocol(w.to_string()),
            other => OracleError::Io(other.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimingSample {
    pub plaintext: Block,
    pub cycles: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub answered: u64,
    pub dropped: u64,
}

const POLL_INTERVAL: Duration = Duration::from_millis(50);
const MAX_DATAGRAM: usize = 65_536;

pub struct TimingServer {
    socket: UdpSocket,
    service: EncryptionService,
}

impl TimingServer {
    pub fn bind(config: ChannelConfig) -> Result<Self, ChannelError> {
        let addr = config.listen;
        let service = EncryptionService::new(config)?;
        let socket = UdpSocket::bind(addr).map_err(|source| ChannelError::Bind { addr, source })?;
        socket.set_read_timeout(Some(POLL_INTERVAL))?;
        Ok(Self { socket, service })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, ChannelError> {
        Ok(self.socket.local_addr()?)
    }

    /// Serves until `stop` is set. Malformed datagrams are logged and dropped.
    pub fn serve(&mut self, stop: &AtomicBool) -> Result<ServeStats, ChannelError> {
        let mut buf = vec![0u8; MAX_DATAGRAM];
        let mut stats = ServeStats::default();
        while !stop.load(Ordering::Relaxed) {
            let (len, peer) = match self.socket.recv_from(&mut buf) {
                Ok(x) => x,
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => continue,
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                // ICMP unreachable from an earlier reply surfaces here on some
                // platforms; it says nothing about this socket.
                Err(e) if e.kind() == ErrorKind::ConnectionReset => continue,
                Err(e) => return Err(e.into()),
            };
            match self.service.handle(&buf[..len]) {
                Some(resp) => {
                    if let Err(e) = self.socket.send_to(&resp, peer) {
                        log::warn!("reply to {peer} failed: {e}");
                    }
                    stats.answered += 1;
                }
                None => {
                    log::info!("dropped malformed datagram of {len} bytes from {peer}");
                    stats.dropped += 1;
                }
            }
        }
        Ok(stats)
    }

    /// Runs the server on its own thread.
    pub fn spawn(mut self) -> Result<ServerHandle, ChannelError> {
        let addr = self.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let join = std::thread::Builder::new()
            .name("timing-server".into())
            .spawn(move || self.serve(&flag))?;
        Ok(ServerHandle { addr, stop, join })
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    join: JoinHandle<Result<ServeStats, ChannelError>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(self) -> Result<ServeStats, ChannelError> {
        self.stop.store(true, Ordering::Relaxed);
        self.join
            .join()
            .map_err(|_| ChannelError::Config("server thread panicked".into()))?
    }
}

/// Binds, then serves on the calling thread until `stop` is set.
pub fn serve(config: ChannelConfig, stop: &AtomicBool) -> Result<ServeStats, ChannelError> {
    TimingServer::bind(config)?.serve(stop)
}

pub const DEFAULT_TIMEOUT: Duration = Duration::from_millis(500);

pub struct TimingClient {
    socket: UdpSocket,
    server: SocketAddr,
    packet_size: usize,
    timeout: Duration,
    timeouts: u64,
}

impl TimingClient {
    pub fn connect<A: ToSocketAddrs>(server: A, packet_size: usize) -> Result<Self, ChannelError> {
        let server = server
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| ChannelError::Config("endpoint resolved to nothing".into()))?;
        if packet_size < wire::MIN_REQUEST_LEN {
            return Err(wire::WireError::PacketSize(packet_size).into());
        }
        let local: SocketAddr = if server.is_ipv4() {
            ([0, 0, 0, 0], 0).into()
        } else {
            (std::net::Ipv6Addr::UNSPECIFIED, 0).into()
        };
        let socket = UdpSocket::bind(local)?;
        Ok(Self {
            socket,
            server,
            packet_size,
            timeout: DEFAULT_TIMEOUT,
            timeouts: 0,
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Requests that went unanswered so far.
    pub fn timeouts(&self) -> u64 {
        self.timeouts
    }

    fn exchange(&mut self, kind: RequestKind, pt: &Block) -> Result<Response, ChannelError> {
        let req = Request { kind, plaintext: *pt }.encode(self.packet_size)?;
        self.socket.send_to(&req, self.server)?;
        let deadline = Instant::now() + self.timeout;
        let mut buf = [0u8; 128];
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                self.timeouts += 1;
                return Err(ChannelError::Timeout(self.timeout));
            }
            self.socket.set_read_timeout(Some(left))?;
            let (len, from) = match self.socket.recv_from(&mut buf) {
                Ok(x) => x,
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => continue,
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            };
            if from != self.server {
                continue;
            }
            // Late replies to earlier, timed-out requests are skipped.
            match Response::decode(&buf[..len]) {
                Ok(resp) if resp.plaintext() == pt => {
                    let same_kind = matches!(
                        (&resp, kind),
                        (Response::Timing { .. }, RequestKind::Timing)
                            | (Response::Ciphertext { .. }, RequestKind::Ciphertext)
                    );
                    if same_kind {
                        return Ok(resp);
                    }
                }
                Ok(_) => {}
                Err(e) => log::debug!("ignoring undecodable reply: {e}"),
            }
        }
    }

    pub fn measure_once(&mut self, pt: &Block) -> Result<TimingSample, ChannelError> {
        match self.exchange(RequestKind::Timing, pt)? {
            Response::Timing { plaintext, cycles } => Ok(TimingSample { plaintext, cycles }),
            Response::Ciphertext { .. } => unreachable!("exchange filters by kind"),
        }
    }

    pub fn ciphertext_query(&mut self, pt: &Block) -> Result<Block, ChannelError> {
        match self.exchange(RequestKind::Ciphertext, pt)? {
            Response::Ciphertext { ciphertext, .. } => Ok(ciphertext),
            Response::Timing { .. } => unreachable!("exchange filters by kind"),
        }
    }
}

impl TimingOracle for TimingClient {
    fn time(&mut self, pt: &Block) -> Result<u64, OracleError> {
        Ok(self.measure_once(pt)?.cycles)
    }
}

/// One-shot timing query.
pub fn measure_once<A: ToSocketAddrs>(
    endpoint: A,
    pt: &Block,
    packet_size: usize,
) -> Result<TimingSample, ChannelError> {
    TimingClient::connect(endpoint, packet_size)?.measure_once(pt)
}

/// One-shot ciphertext query.
pub fn ciphertext_query<A: ToSocketAddrs>(
    endpoint: A,
    pt: &Block,
    packet_size: usize,
) -> Result<Block, ChannelError> {
    TimingClient::connect(endpoint, packet_size)?.ciphertext_query(pt)
}

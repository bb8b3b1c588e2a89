//! Stream-socket transport and a threaded central-node server.

use std::io::{self, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use etmpc_core::netio::{
    CentralNode, ErrorCode, Frame, FrameKind, FrameStats, Header, Transport, TransportError, HEADER_LEN,
};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(1);

/// Largest payload the server accepts; far above any real request.
pub const MAX_PAYLOAD: usize = 1 << 20;

fn classify(e: io::Error) -> TransportError {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => TransportError::Timeout,
        ErrorKind::UnexpectedEof
        | ErrorKind::ConnectionReset
        | ErrorKind::ConnectionAborted
        | ErrorKind::ConnectionRefused
        | ErrorKind::BrokenPipe
        | ErrorKind::NotConnected => TransportError::ConnectionLost(e.to_string()),
        _ => TransportError::Io(e.to_string()),
    }
}

/// Reads one whole frame. `Ok(None)` on a clean end of stream before the
/// first header byte.
fn read_frame(stream: &mut TcpStream, max_payload: usize) -> io::Result<Option<Vec<u8>>> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match stream.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(ErrorKind::UnexpectedEof.into()),
            Ok(k) => filled += k,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let parsed = Header::parse(&header).map_err(|e| io::Error::new(ErrorKind::InvalidData, e))?;
    if parsed.payload_len > max_payload {
        return Err(io::Error::new(ErrorKind::InvalidData, "payload too large"));
    }
    let mut frame = header.to_vec();
    frame.resize(HEADER_LEN + parsed.payload_len, 0);
    stream.read_exact(&mut frame[HEADER_LEN..])?;
    Ok(Some(frame))
}

/// Client side of a stream connection to the central node. Reconnects
/// lazily after a timeout or a lost connection.
#[derive(Debug)]
pub struct TcpTransport {
    addr: SocketAddr,
    timeout: Option<Duration>,
    stream: Option<TcpStream>,
    stats: FrameStats,
    latency_budget: Option<Duration>,
    slowest: Duration,
    over_budget: u64,
}

impl TcpTransport {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(ErrorKind::InvalidInput, "address resolves to nothing"))?;
        let mut t = Self {
            addr,
            timeout: Some(DEFAULT_TIMEOUT),
            stream: None,
            stats: FrameStats::default(),
            latency_budget: None,
            slowest: Duration::ZERO,
            over_budget: 0,
        };
        t.stream = Some(t.open()?);
        Ok(t)
    }

    /// `None` waits forever.
    pub fn with_timeout(mut self, timeout: Option<Duration>) -> Self {
        self.timeout = timeout;
        if let Some(s) = &self.stream {
            let _ = s.set_read_timeout(timeout);
            let _ = s.set_write_timeout(timeout);
        }
        self
    }

    /// Counts replies slower than `budget`, typically the sampling period.
    pub fn with_latency_budget(mut self, budget: Duration) -> Self {
        self.latency_budget = Some(budget);
        self
    }

    pub fn slowest_reply(&self) -> Duration {
        self.slowest
    }

    /// Replies that took longer than the latency budget.
    pub fn late_replies(&self) -> u64 {
        self.over_budget
    }

    fn open(&self) -> io::Result<TcpStream> {
        let stream = match self.timeout {
            Some(t) => TcpStream::connect_timeout(&self.addr, t)?,
            None => TcpStream::connect(self.addr)?,
        };
        stream.set_read_timeout(self.timeout)?;
        stream.set_write_timeout(self.timeout)?;
        stream.set_nodelay(true)?;
        Ok(stream)
    }

    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>, TransportError> {
        if self.stream.is_none() {
            self.stream = Some(self.open().map_err(classify)?);
        }
        let stream = self.stream.as_mut().expect("connected above");
        stream.write_all(request).map_err(classify)?;
        match read_frame(stream, usize::MAX).map_err(classify)? {
            Some(reply) => Ok(reply),
            None => Err(TransportError::ConnectionLost("server closed the connection".into())),
        }
    }
}

impl Transport for TcpTransport {
    fn round_trip(&mut self, request: &[u8]) -> Result<Vec<u8>, TransportError> {
        let start = Instant::now();
        let result = self.exchange(request);
        match &result {
            Ok(reply) => {
                let elapsed = start.elapsed();
                self.slowest = self.slowest.max(elapsed);
                if self.latency_budget.is_some_and(|b| elapsed > b) {
                    self.over_budget += 1;
                    log::warn!("central node answered in {elapsed:?}, longer than the sampling period");
                }
                self.stats.record(request, reply);
            }
            // the stream may hold half a frame now
            Err(_) => self.stream = None,
        }
        result
    }

    fn stats(&self) -> FrameStats {
        self.stats
    }
}

/// A bound listener that answers frames with a [`CentralNode`], one thread
/// per connection.
pub struct Server {
    listener: TcpListener,
    node: Arc<CentralNode>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, node: Arc<CentralNode>) -> io::Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            node,
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Serves until the process ends.
    pub fn run(self) -> io::Result<()> {
        let stop = Arc::new(AtomicBool::new(false));
        self.accept_loop(&stop)
    }

    /// Serves on a background thread until [`ServerHandle::shutdown`].
    pub fn spawn(self) -> io::Result<ServerHandle> {
        let addr = self.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = std::thread::spawn(move || self.accept_loop(&flag));
        Ok(ServerHandle { addr, stop, thread })
    }

    fn accept_loop(self, stop: &AtomicBool) -> io::Result<()> {
        for conn in self.listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            let stream = match conn {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let node = self.node.clone();
            std::thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = serve_connection(stream, &node) {
                    log::debug!("connection {peer:?} ended: {e}");
                }
            });
        }
        Ok(())
    }
}

fn serve_connection(mut stream: TcpStream, node: &CentralNode) -> io::Result<()> {
    stream.set_nodelay(true)?;
    loop {
        let request = match read_frame(&mut stream, MAX_PAYLOAD) {
            Ok(Some(r)) => r,
            Ok(None) => return Ok(()),
            Err(e) if e.kind() == ErrorKind::InvalidData => {
                // cannot resynchronize on a broken header; answer and hang up
                let mut payload = vec![ErrorCode::Malformed as u8];
                payload.extend_from_slice(e.to_string().as_bytes());
                stream.write_all(&Frame::new(FrameKind::Error, 0, payload).encode())?;
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        stream.write_all(&node.handle(&request))?;
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: JoinHandle<io::Result<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting connections. Open connections finish on their own.
    pub fn shutdown(self) -> io::Result<()> {
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        self.thread.join().unwrap_or_else(|_| Err(io::Error::other("server thread panicked")))
    }
}

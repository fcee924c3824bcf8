//! Transport abstraction between the edge client and the server.

use std::io::{self};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use crate::protocol::{read_frame_bytes, FrameIoError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinkError {
    #[error("link is down")]
    Offline,
    /// Bytes that made it across before the deadline are reported so the
    /// caller's ledger stays exact.
    #[error("timed out after sending {sent} and receiving {received} bytes")]
    Timeout { sent: u64, received: u64 },
    #[error("transport error: {0}")]
    Io(String),
}

impl LinkError {
    /// `(sent, received)` bytes that crossed the wire before the failure.
    pub fn partial(&self) -> (u64, u64) {
        match self {
            LinkError::Timeout { sent, received } => (*sent, *received),
            _ => (0, 0),
        }
    }
}

/// One request/response channel. Implementations carry exactly one
/// request in flight at a time.
pub trait Link: Send {
    fn exchange(&mut self, frame: &[u8], timeout: Duration) -> Result<Vec<u8>, LinkError>;

    /// Several independent requests sent back to back; answers come back in
    /// order. Processing stops at the first failure, whose error is the last
    /// element.
    fn exchange_window(&mut self, frames: &[Vec<u8>], timeout: Duration) -> Vec<Result<Vec<u8>, LinkError>> {
        let mut out = Vec::with_capacity(frames.len());
        for f in frames {
            let r = self.exchange(f, timeout);
            let failed = r.is_err();
            out.push(r);
            if failed {
                break;
            }
        }
        out
    }
}

/// Anything that answers a request frame with a response frame.
pub trait Endpoint: Send + Sync {
    fn handle_frame(&self, frame: &[u8]) -> Vec<u8>;
}

/// Millisecond clock; virtual in simulation.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
    }
}

/// Framed protocol over a TCP connection, reconnecting on demand.
pub struct TcpLink {
    addr: String,
    connect_timeout: Duration,
    stream: Option<TcpStream>,
}

impl TcpLink {
    pub fn new(addr: impl Into<String>) -> Self {
        Self { addr: addr.into(), connect_timeout: Duration::from_secs(5), stream: None }
    }

    pub fn with_connect_timeout(mut self, t: Duration) -> Self {
        self.connect_timeout = t;
        self
    }

    fn connect(&mut self) -> Result<&mut TcpStream, LinkError> {
        if self.stream.is_none() {
            let addrs = self.addr.to_socket_addrs().map_err(|e| LinkError::Io(format!("{}: {e}", self.addr)))?;
            let mut last = None;
            for a in addrs {
                match TcpStream::connect_timeout(&a, self.connect_timeout) {
                    Ok(s) => {
                        let _ = s.set_nodelay(true);
                        self.stream = Some(s);
                        break;
                    }
                    Err(e) => last = Some(e),
                }
            }
            if self.stream.is_none() {
                log::debug!("connect {} failed: {last:?}", self.addr);
                return Err(LinkError::Offline);
            }
        }
        Ok(self.stream.as_mut().expect("connected"))
    }

    fn round_trip(&mut self, frame: &[u8], timeout: Duration) -> Result<Vec<u8>, LinkError> {
        use std::io::Write;
        let s = self.connect()?;
        let t = Some(timeout.max(Duration::from_millis(1)));
        s.set_read_timeout(t).and_then(|_| s.set_write_timeout(t)).map_err(|e| LinkError::Io(e.to_string()))?;
        s.write_all(frame).and_then(|_| s.flush()).map_err(io_error(frame.len() as u64))?;
        read_frame_bytes(s).map_err(|e| match e {
            FrameIoError::Io(e) => io_error(frame.len() as u64)(e),
            FrameIoError::Protocol(p) => LinkError::Io(p.to_string()),
        })
    }
}

fn io_error(sent: u64) -> impl Fn(io::Error) -> LinkError {
    move |e| match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => LinkError::Timeout { sent, received: 0 },
        _ => LinkError::Io(e.to_string()),
    }
}

impl Link for TcpLink {
    fn exchange(&mut self, frame: &[u8], timeout: Duration) -> Result<Vec<u8>, LinkError> {
        let reused = self.stream.is_some();
        let mut r = self.round_trip(frame, timeout);
        if r.is_err() {
            // the stream may hold half a frame; never reuse it
            self.stream = None;
        }
        // a kept-alive connection the server has since closed fails at once;
        // requests are idempotent, so retry once on a fresh one
        if reused && matches!(r, Err(LinkError::Io(_))) {
            r = self.round_trip(frame, timeout);
            if r.is_err() {
                self.stream = None;
            }
        }
        r
    }
}

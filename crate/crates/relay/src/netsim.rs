//! Deterministic dial-up link simulation on a virtual clock.
//!
//! A link has a fixed bandwidth, a one-way latency and a schedule of
//! outages. Bits only move while the link is up; an outage pauses a
//! transfer in progress. Uplink and downlink are independent directions.

use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use crate::link::{Clock, Endpoint, Link, LinkError};
use crate::protocol::{MsgType, HEADER_LEN};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NetsimError {
    #[error("invalid link profile: {0}")]
    Profile(String),
}

/// Half-open interval `[start, end)` in simulated seconds; `end` may be
/// infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outage {
    pub start: f64,
    pub end: f64,
}

impl Outage {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t < self.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkProfile {
    pub bandwidth_kbps: f64,
    /// One-way.
    pub latency_ms: f64,
    pub outages: Vec<Outage>,
}

impl Default for LinkProfile {
    fn default() -> Self {
        Self::dialup()
    }
}

impl LinkProfile {
    pub const DIALUP_KBPS: f64 = 56.0;
    pub const DIALUP_LATENCY_MS: f64 = 100.0;

    pub fn dialup() -> Self {
        Self { bandwidth_kbps: Self::DIALUP_KBPS, latency_ms: Self::DIALUP_LATENCY_MS, outages: Vec::new() }
    }

    pub fn validate(&self) -> Result<(), NetsimError> {
        if !(self.bandwidth_kbps > 0.0 && self.bandwidth_kbps.is_finite()) {
            return Err(NetsimError::Profile(format!("bandwidth must be > 0, got {}", self.bandwidth_kbps)));
        }
        if !(self.latency_ms >= 0.0 && self.latency_ms.is_finite()) {
            return Err(NetsimError::Profile(format!("latency must be >= 0, got {}", self.latency_ms)));
        }
        let mut prev_end = f64::NEG_INFINITY;
        for o in &self.outages {
            if !(o.start.is_finite() && o.start >= 0.0 && o.end > o.start) {
                return Err(NetsimError::Profile(format!("bad outage [{}, {})", o.start, o.end)));
            }
            if o.start < prev_end {
                return Err(NetsimError::Profile(format!("outage at {} overlaps the previous one", o.start)));
            }
            prev_end = o.end;
        }
        Ok(())
    }

    fn bytes_per_sec(&self) -> f64 {
        self.bandwidth_kbps * 1000.0 / 8.0
    }

    pub fn latency(&self) -> f64 {
        self.latency_ms / 1000.0
    }

    pub fn is_up(&self, t: f64) -> bool {
        !self.outages.iter().any(|o| o.contains(t))
    }

    /// End of the outage covering `t`, or `t` itself when the link is up.
    pub fn next_up(&self, t: f64) -> f64 {
        self.outages.iter().find(|o| o.contains(t)).map_or(t, |o| o.end)
    }

    /// Instant at which `bytes` finish transmitting when started at `t`,
    /// pausing through outages. Infinite if an endless outage intervenes.
    pub fn transmit_end(&self, t: f64, bytes: u64) -> f64 {
        let mut need = bytes as f64 / self.bytes_per_sec();
        let start = self.next_up(t);
        let mut now = start;
        for o in self.outages.iter().filter(|o| o.end > start) {
            let gap = o.start - now;
            if gap >= need {
                break;
            }
            need -= gap.max(0.0);
            now = o.end;
            if now.is_infinite() {
                return f64::INFINITY;
            }
        }
        now + need
    }

    /// Link-up seconds inside `[from, to)`.
    pub fn uptime(&self, from: f64, to: f64) -> f64 {
        if to <= from {
            return 0.0;
        }
        let down: f64 = self.outages.iter().map(|o| (o.end.min(to) - o.start.max(from)).max(0.0)).sum();
        (to - from) - down
    }

    /// Whole bytes of a `total`-byte transmission started at `from` that
    /// have left the sender by `to`.
    pub fn transmitted(&self, from: f64, to: f64, total: u64) -> u64 {
        let b = (self.uptime(from, to) * self.bytes_per_sec()).floor();
        (b.max(0.0) as u64).min(total)
    }
}

/// Outage-free wall time for `bytes`: `bytes * 8 / (kbps * 1000) + 2 * latency`.
pub fn transfer_time(bytes: u64, profile: &LinkProfile) -> f64 {
    bytes as f64 * 8.0 / (profile.bandwidth_kbps * 1000.0) + 2.0 * profile.latency()
}

/// Bytes delivered to the receiving side, per direction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct SimCounters {
    pub bytes_up: u64,
    pub bytes_down: u64,
}

/// One transmission on the wire, for throughput checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transmission {
    pub up: bool,
    pub start: f64,
    pub end: f64,
    pub bytes: u64,
}

/// Shared simulation state: the clock, the line, and the event log.
#[derive(Debug)]
pub struct SimNet {
    profile: LinkProfile,
    now: f64,
    up_free: f64,
    down_free: f64,
    counters: SimCounters,
    log: Vec<String>,
    wire: Vec<Transmission>,
    log_wire: bool,
}

fn frame_kind(frame: &[u8]) -> String {
    match frame.get(3).and_then(|&b| MsgType::from_u8(b)) {
        Some(t) if frame.len() >= HEADER_LEN => format!("{t:?}"),
        _ => "?".to_string(),
    }
}

impl SimNet {
    pub fn new(profile: LinkProfile) -> Result<Self, NetsimError> {
        profile.validate()?;
        Ok(Self {
            profile,
            now: 0.0,
            up_free: 0.0,
            down_free: 0.0,
            counters: SimCounters::default(),
            log: Vec::new(),
            wire: Vec::new(),
            log_wire: true,
        })
    }

    pub fn shared(profile: LinkProfile) -> Result<SharedNet, NetsimError> {
        Ok(SharedNet(Arc::new(Mutex::new(Self::new(profile)?))))
    }

    pub fn profile(&self) -> &LinkProfile {
        &self.profile
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    /// Move the clock forward; never backwards.
    pub fn advance_to(&mut self, t: f64) {
        if t > self.now {
            self.now = t;
        }
    }

    pub fn counters(&self) -> SimCounters {
        self.counters
    }

    pub fn wire(&self) -> &[Transmission] {
        &self.wire
    }

    pub fn set_wire_logging(&mut self, on: bool) {
        self.log_wire = on;
    }

    pub fn note(&mut self, msg: impl AsRef<str>) {
        let line = format!("t={:.3} {}", self.now, msg.as_ref());
        self.log.push(line);
    }

    fn wire_note(&mut self, t: f64, msg: String) {
        if self.log_wire {
            self.log.push(format!("t={t:.3} {msg}"));
        }
    }

    pub fn log(&self) -> &[String] {
        &self.log
    }

    pub fn take_log(&mut self) -> Vec<String> {
        std::mem::take(&mut self.log)
    }

    /// Schedule a transmission on one direction; returns (start, end).
    fn send(&mut self, up: bool, ready: f64, bytes: u64) -> (f64, f64) {
        let free = if up { self.up_free } else { self.down_free };
        let start = self.profile.next_up(ready.max(free));
        let end = self.profile.transmit_end(start, bytes);
        if up {
            self.up_free = end;
        } else {
            self.down_free = end;
        }
        (start, end)
    }

    /// Pipelined exchange of `frames` against `endpoint`, sharing one
    /// deadline. Requests go out back to back and each answer starts as
    /// soon as its request has arrived and the downlink is free.
    pub fn exchange_window(
        &mut self,
        frames: &[Vec<u8>],
        endpoint: &dyn Endpoint,
        timeout: Duration,
    ) -> Vec<Result<Vec<u8>, LinkError>> {
        let t0 = self.now;
        if frames.is_empty() {
            return Vec::new();
        }
        if !self.profile.is_up(t0) {
            self.wire_note(t0, format!("offline {}", frame_kind(&frames[0])));
            return vec![Err(LinkError::Offline)];
        }
        let lat = self.profile.latency();
        let deadline = t0 + timeout.as_secs_f64();
        // calls are sequential, so the line is idle when one starts
        self.up_free = t0;
        self.down_free = t0;
        let mut out = Vec::with_capacity(frames.len());
        let mut finish = t0;
        for f in frames {
            let kind = frame_kind(f);
            let (us, ue) = self.send(true, t0, f.len() as u64);
            let arrive = ue + lat;
            if arrive > deadline {
                let sent = self.profile.transmitted(us, deadline - lat, f.len() as u64);
                self.counters.bytes_up += sent;
                self.record(true, us, deadline - lat, sent);
                self.wire_note(deadline, format!("timeout {kind} sent={sent}B recv=0B"));
                out.push(Err(LinkError::Timeout { sent, received: 0 }));
                finish = deadline;
                break;
            }
            self.counters.bytes_up += f.len() as u64;
            self.record(true, us, ue, f.len() as u64);
            self.wire_note(us, format!("send {kind} {}B", f.len()));
            let resp = endpoint.handle_frame(f);
            let rkind = frame_kind(&resp);
            let (ds, de) = self.send(false, arrive, resp.len() as u64);
            let back = de + lat;
            if back > deadline {
                let received = self.profile.transmitted(ds, deadline - lat, resp.len() as u64);
                self.counters.bytes_down += received;
                self.record(false, ds, deadline - lat, received);
                self.wire_note(deadline, format!("timeout {kind} sent={}B recv={received}B", f.len()));
                out.push(Err(LinkError::Timeout { sent: f.len() as u64, received }));
                finish = deadline;
                break;
            }
            self.counters.bytes_down += resp.len() as u64;
            self.record(false, ds, de, resp.len() as u64);
            self.wire_note(back, format!("recv {rkind} {}B", resp.len()));
            finish = finish.max(back);
            out.push(Ok(resp));
        }
        self.now = finish;
        out
    }

    fn record(&mut self, up: bool, start: f64, end: f64, bytes: u64) {
        if bytes > 0 {
            self.wire.push(Transmission { up, start, end: end.max(start), bytes });
        }
    }
}

/// Handle to a [`SimNet`] shared by the links and the scenario driver.
#[derive(Debug, Clone)]
pub struct SharedNet(pub Arc<Mutex<SimNet>>);

impl SharedNet {
    pub fn lock(&self) -> MutexGuard<'_, SimNet> {
        self.0.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn link(&self, endpoint: Arc<dyn Endpoint>) -> SimLink {
        SimLink { net: self.clone(), endpoint }
    }

    pub fn clock(&self) -> SimClock {
        SimClock(self.clone())
    }
}

/// A [`Link`] whose every byte is timed and counted by the shared net.
pub struct SimLink {
    net: SharedNet,
    endpoint: Arc<dyn Endpoint>,
}

impl Link for SimLink {
    fn exchange(&mut self, frame: &[u8], timeout: Duration) -> Result<Vec<u8>, LinkError> {
        let mut r = self.exchange_window(&[frame.to_vec()], timeout);
        r.pop().expect("one result per single exchange")
    }

    fn exchange_window(&mut self, frames: &[Vec<u8>], timeout: Duration) -> Vec<Result<Vec<u8>, LinkError>> {
        self.net.lock().exchange_window(frames, self.endpoint.as_ref(), timeout)
    }
}

pub struct SimClock(SharedNet);

impl Clock for SimClock {
    fn now_ms(&self) -> u64 {
        (self.0.lock().now() * 1000.0).round() as u64
    }
}

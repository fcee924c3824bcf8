//! Framed binary wire format between edge clients and the server.
//!
//! ```text
//! "CX" | u8 version | u8 msg type | u32 payload len | payload | u32 CRC-32
//! ```
//!
//! The CRC covers the 8-byte header and the payload. All integers are
//! little-endian.

use std::io::{self, Read, Write};

use cxr_core::dataset::SCAN_SIDE;
use cxr_core::metrics::Class;
use cxr_core::wire::Reader;
use cxr_core::Digest;

pub const MAGIC: &[u8; 2] = b"CX";
pub const PROTOCOL_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 8;
pub const CRC_LEN: usize = 4;
pub const FRAME_OVERHEAD: usize = HEADER_LEN + CRC_LEN;
pub const MAX_PAYLOAD: usize = 16 << 20;
/// Fixed request metadata block; shorter metadata is zero-padded.
pub const META_LEN: usize = 1024;
pub const IMAGE_LEN: usize = SCAN_SIDE * SCAN_SIDE;
pub const CHUNK_LEN: usize = 8 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    PredictReq = 1,
    PredictResp = 2,
    ConfirmReq = 3,
    Ack = 4,
    UpdateCheck = 5,
    UpdateAvail = 6,
    UpdateNone = 7,
    ModelChunk = 8,
    FlushBatch = 9,
    Error = 10,
}

impl MsgType {
    pub fn from_u8(b: u8) -> Option<Self> {
        use MsgType::*;
        Some(match b {
            1 => PredictReq,
            2 => PredictResp,
            3 => ConfirmReq,
            4 => Ack,
            5 => UpdateCheck,
            6 => UpdateAvail,
            7 => UpdateNone,
            8 => ModelChunk,
            9 => FlushBatch,
            10 => Error,
            _ => return None,
        })
    }
}

/// Reason codes carried by [`ProtocolError`] and by `Error` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum ErrorCode {
    BadMagic = 1,
    BadVersion = 2,
    BadChecksum = 3,
    BadLength = 4,
    UnknownType = 5,
    Oversized = 6,
    Malformed = 7,
    NotFound = 8,
    Unavailable = 9,
    Internal = 10,
}

impl ErrorCode {
    pub fn from_u16(v: u16) -> Option<Self> {
        use ErrorCode::*;
        Some(match v {
            1 => BadMagic,
            2 => BadVersion,
            3 => BadChecksum,
            4 => BadLength,
            5 => UnknownType,
            6 => Oversized,
            7 => Malformed,
            8 => NotFound,
            9 => Unavailable,
            10 => Internal,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("protocol error {code:?}: {detail}")]
pub struct ProtocolError {
    pub code: ErrorCode,
    pub detail: String,
}

impl ProtocolError {
    pub fn new(code: ErrorCode, detail: impl Into<String>) -> Self {
        Self { code, detail: detail.into() }
    }

    fn malformed(detail: impl Into<String>) -> Self {
        Self::new(ErrorCode::Malformed, detail)
    }
}

impl From<cxr_core::wire::Truncated> for ProtocolError {
    fn from(e: cxr_core::wire::Truncated) -> Self {
        Self::malformed(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

/// Request metadata packed into the fixed 1024-byte block.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RequestMeta {
    pub scan_id: String,
    /// Opaque; passed through untouched.
    pub token: String,
    pub deployment: String,
    pub timestamp_ms: u64,
    /// Compressed-model digest the client holds; zero when unprovisioned.
    pub client_model: Digest,
}

impl RequestMeta {
    fn encode(&self, out: &mut Vec<u8>) -> Result<()> {
        let start = out.len();
        put_str(out, &self.scan_id)?;
        put_str(out, &self.token)?;
        put_str(out, &self.deployment)?;
        out.extend_from_slice(&self.timestamp_ms.to_le_bytes());
        out.extend_from_slice(self.client_model.as_bytes());
        out.resize(start + META_LEN, 0);
        Ok(())
    }

    fn decode(block: &[u8]) -> Result<Self> {
        let mut r = Reader::new(block);
        let scan_id = get_str(&mut r)?;
        let token = get_str(&mut r)?;
        let deployment = get_str(&mut r)?;
        let timestamp_ms = r.u64()?;
        let client_model = get_digest(&mut r)?;
        Ok(Self { scan_id, token, deployment, timestamp_ms, client_model })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictRequest {
    pub meta: RequestMeta,
    /// Preprocessed 128×128 raster, row-major.
    pub image: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictResponse {
    pub scan_id: String,
    pub probability: f32,
    pub verdict: Class,
    pub model_version: u64,
    /// Digest of the active compressed model.
    pub model_digest: Digest,
    pub recall: f32,
    pub precision: f32,
    /// Set when the client's model differs from the active one.
    pub update_hint: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confirmation {
    pub scan_id: String,
    pub confirmed: bool,
    /// Verdict the user saw.
    pub verdict: Class,
}

/// One cached item replayed after reconnect.
#[derive(Debug, Clone, PartialEq)]
pub enum FlushItem {
    Scan { request: PredictRequest, local_probability: f32, local_verdict: Class, local_version: u64 },
    Confirm(Confirmation),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    PredictReq(PredictRequest),
    PredictResp(PredictResponse),
    ConfirmReq(Confirmation),
    Ack { scan_id: Option<String> },
    /// Zero digest means the client has no model yet.
    UpdateCheck { digest: Digest },
    UpdateAvail { digest: Digest, size: u64, version: u64 },
    UpdateNone,
    /// With empty `data` this is a request for the chunk at `offset`.
    ModelChunk { digest: Digest, offset: u64, data: Vec<u8> },
    FlushBatch(FlushItem),
    Error { code: u16, message: String },
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::PredictReq(_) => MsgType::PredictReq,
            Message::PredictResp(_) => MsgType::PredictResp,
            Message::ConfirmReq(_) => MsgType::ConfirmReq,
            Message::Ack { .. } => MsgType::Ack,
            Message::UpdateCheck { .. } => MsgType::UpdateCheck,
            Message::UpdateAvail { .. } => MsgType::UpdateAvail,
            Message::UpdateNone => MsgType::UpdateNone,
            Message::ModelChunk { .. } => MsgType::ModelChunk,
            Message::FlushBatch(_) => MsgType::FlushBatch,
            Message::Error { .. } => MsgType::Error,
        }
    }

    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Message::Error { code: code as u16, message: message.into() }
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let b = s.as_bytes();
    if b.len() > u8::MAX as usize {
        return Err(ProtocolError::malformed(format!("string of {} bytes exceeds 255", b.len())));
    }
    out.push(b.len() as u8);
    out.extend_from_slice(b);
    Ok(())
}

fn get_str(r: &mut Reader) -> Result<String> {
    let n = r.u8()? as usize;
    String::from_utf8(r.take(n)?.to_vec()).map_err(|_| ProtocolError::malformed("string is not utf-8"))
}

fn get_digest(r: &mut Reader) -> Result<Digest> {
    Ok(Digest::from_slice(r.take(Digest::LEN)?).expect("32 bytes"))
}

fn put_class(out: &mut Vec<u8>, c: Class) {
    out.push(c.index() as u8);
}

fn get_class(r: &mut Reader) -> Result<Class> {
    let b = r.u8()?;
    Class::from_index(b as usize).ok_or_else(|| ProtocolError::malformed(format!("bad verdict byte {b}")))
}

fn get_bool(r: &mut Reader) -> Result<bool> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        b => Err(ProtocolError::malformed(format!("bad flag byte {b}"))),
    }
}

fn put_predict(out: &mut Vec<u8>, req: &PredictRequest) -> Result<()> {
    if req.image.len() != IMAGE_LEN {
        return Err(ProtocolError::malformed(format!("image must be {IMAGE_LEN} bytes, got {}", req.image.len())));
    }
    req.meta.encode(out)?;
    out.extend_from_slice(&req.image);
    Ok(())
}

fn get_predict(r: &mut Reader) -> Result<PredictRequest> {
    let meta = RequestMeta::decode(r.take(META_LEN)?)?;
    let image = r.take(IMAGE_LEN)?.to_vec();
    Ok(PredictRequest { meta, image })
}

fn put_confirm(out: &mut Vec<u8>, c: &Confirmation) -> Result<()> {
    put_str(out, &c.scan_id)?;
    out.push(c.confirmed as u8);
    put_class(out, c.verdict);
    Ok(())
}

fn get_confirm(r: &mut Reader) -> Result<Confirmation> {
    Ok(Confirmation { scan_id: get_str(r)?, confirmed: get_bool(r)?, verdict: get_class(r)? })
}

fn encode_payload(msg: &Message) -> Result<Vec<u8>> {
    let mut p = Vec::new();
    match msg {
        Message::PredictReq(req) => put_predict(&mut p, req)?,
        Message::PredictResp(r) => {
            put_str(&mut p, &r.scan_id)?;
            p.extend_from_slice(&r.probability.to_le_bytes());
            put_class(&mut p, r.verdict);
            p.extend_from_slice(&r.model_version.to_le_bytes());
            p.extend_from_slice(r.model_digest.as_bytes());
            p.extend_from_slice(&r.recall.to_le_bytes());
            p.extend_from_slice(&r.precision.to_le_bytes());
            p.push(r.update_hint as u8);
        }
        Message::ConfirmReq(c) => put_confirm(&mut p, c)?,
        Message::Ack { scan_id } => {
            if let Some(id) = scan_id {
                put_str(&mut p, id)?;
            }
        }
        Message::UpdateCheck { digest } => p.extend_from_slice(digest.as_bytes()),
        Message::UpdateAvail { digest, size, version } => {
            p.extend_from_slice(digest.as_bytes());
            p.extend_from_slice(&size.to_le_bytes());
            p.extend_from_slice(&version.to_le_bytes());
        }
        Message::UpdateNone => {}
        Message::ModelChunk { digest, offset, data } => {
            p.extend_from_slice(digest.as_bytes());
            p.extend_from_slice(&offset.to_le_bytes());
            p.extend_from_slice(data);
        }
        Message::FlushBatch(item) => match item {
            FlushItem::Scan { request, local_probability, local_verdict, local_version } => {
                p.push(0);
                put_predict(&mut p, request)?;
                p.extend_from_slice(&local_probability.to_le_bytes());
                put_class(&mut p, *local_verdict);
                p.extend_from_slice(&local_version.to_le_bytes());
            }
            FlushItem::Confirm(c) => {
                p.push(1);
                put_confirm(&mut p, c)?;
            }
        },
        Message::Error { code, message } => {
            p.extend_from_slice(&code.to_le_bytes());
            let b = message.as_bytes();
            let n = b.len().min(u16::MAX as usize);
            p.extend_from_slice(&(n as u16).to_le_bytes());
            p.extend_from_slice(&b[..n]);
        }
    }
    if p.len() > MAX_PAYLOAD {
        return Err(ProtocolError::new(ErrorCode::Oversized, format!("payload of {} bytes exceeds 16 MiB", p.len())));
    }
    Ok(p)
}

fn decode_payload(ty: MsgType, p: &[u8]) -> Result<Message> {
    let mut r = Reader::new(p);
    let msg = match ty {
        MsgType::PredictReq => Message::PredictReq(get_predict(&mut r)?),
        MsgType::PredictResp => Message::PredictResp(PredictResponse {
            scan_id: get_str(&mut r)?,
            probability: r.f32()?,
            verdict: get_class(&mut r)?,
            model_version: r.u64()?,
            model_digest: get_digest(&mut r)?,
            recall: r.f32()?,
            precision: r.f32()?,
            update_hint: get_bool(&mut r)?,
        }),
        MsgType::ConfirmReq => Message::ConfirmReq(get_confirm(&mut r)?),
        MsgType::Ack => Message::Ack { scan_id: if p.is_empty() { None } else { Some(get_str(&mut r)?) } },
        MsgType::UpdateCheck => {
            if p.len() != Digest::LEN {
                return Err(ProtocolError::malformed(format!("update check digest must be 32 bytes, got {}", p.len())));
            }
            Message::UpdateCheck { digest: get_digest(&mut r)? }
        }
        MsgType::UpdateAvail => {
            Message::UpdateAvail { digest: get_digest(&mut r)?, size: r.u64()?, version: r.u64()? }
        }
        MsgType::UpdateNone => Message::UpdateNone,
        MsgType::ModelChunk => {
            let digest = get_digest(&mut r)?;
            let offset = r.u64()?;
            let data = r.take(r.remaining())?.to_vec();
            Message::ModelChunk { digest, offset, data }
        }
        MsgType::FlushBatch => match r.u8()? {
            0 => {
                let request = get_predict(&mut r)?;
                Message::FlushBatch(FlushItem::Scan {
                    request,
                    local_probability: r.f32()?,
                    local_verdict: get_class(&mut r)?,
                    local_version: r.u64()?,
                })
            }
            1 => Message::FlushBatch(FlushItem::Confirm(get_confirm(&mut r)?)),
            k => return Err(ProtocolError::malformed(format!("unknown flush item kind {k}"))),
        },
        MsgType::Error => {
            let code = r.u16()?;
            let n = r.u16()? as usize;
            let message = String::from_utf8_lossy(r.take(n)?).into_owned();
            Message::Error { code, message }
        }
    };
    if r.remaining() != 0 {
        return Err(ProtocolError::new(ErrorCode::BadLength, format!("{} trailing payload bytes", r.remaining())));
    }
    Ok(msg)
}

pub fn encode_frame(msg: &Message) -> Result<Vec<u8>> {
    let payload = encode_payload(msg)?;
    let mut out = Vec::with_capacity(FRAME_OVERHEAD + payload.len());
    out.extend_from_slice(MAGIC);
    out.push(PROTOCOL_VERSION);
    out.push(msg.msg_type() as u8);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Validated header fields.
fn check_header(h: &[u8]) -> Result<(MsgType, usize)> {
    if &h[..2] != MAGIC {
        return Err(ProtocolError::new(ErrorCode::BadMagic, format!("bad magic {:02x}{:02x}", h[0], h[1])));
    }
    if h[2] != PROTOCOL_VERSION {
        return Err(ProtocolError::new(ErrorCode::BadVersion, format!("unsupported version {}", h[2])));
    }
    let len = u32::from_le_bytes(h[4..8].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(ProtocolError::new(ErrorCode::Oversized, format!("declared payload {len} exceeds 16 MiB")));
    }
    let ty = MsgType::from_u8(h[3])
        .ok_or_else(|| ProtocolError::new(ErrorCode::UnknownType, format!("unknown message type {}", h[3])))?;
    Ok((ty, len))
}

pub fn decode_frame(bytes: &[u8]) -> Result<Message> {
    if bytes.len() < FRAME_OVERHEAD {
        return Err(ProtocolError::new(ErrorCode::BadLength, format!("frame of {} bytes is too short", bytes.len())));
    }
    let (ty, len) = check_header(&bytes[..HEADER_LEN])?;
    if bytes.len() != FRAME_OVERHEAD + len {
        return Err(ProtocolError::new(
            ErrorCode::BadLength,
            format!("header declares {len} payload bytes, frame carries {}", bytes.len() - FRAME_OVERHEAD),
        ));
    }
    let body = &bytes[..HEADER_LEN + len];
    let crc = u32::from_le_bytes(bytes[HEADER_LEN + len..].try_into().unwrap());
    if crc32fast::hash(body) != crc {
        return Err(ProtocolError::new(ErrorCode::BadChecksum, "checksum mismatch"));
    }
    decode_payload(ty, &bytes[HEADER_LEN..HEADER_LEN + len])
}

#[derive(Debug, thiserror::Error)]
pub enum FrameIoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Read one whole frame from a stream. The header is validated before the
/// payload is read so an oversized declaration never allocates.
pub fn read_frame_bytes(r: &mut impl Read) -> std::result::Result<Vec<u8>, FrameIoError> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)?;
    let (_, len) = check_header(&header)?;
    let mut frame = vec![0u8; FRAME_OVERHEAD + len];
    frame[..HEADER_LEN].copy_from_slice(&header);
    r.read_exact(&mut frame[HEADER_LEN..])?;
    Ok(frame)
}

pub fn write_frame(w: &mut impl Write, msg: &Message) -> std::result::Result<usize, FrameIoError> {
    let bytes = encode_frame(msg)?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes.len())
}

/// Transcript of frames as `u8 direction | u32 len | frame`, for replay.
#[derive(Debug, Default, Clone)]
pub struct Transcript {
    entries: Vec<(Direction, Vec<u8>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up = 0,
    Down = 1,
}

impl Transcript {
    pub fn push(&mut self, dir: Direction, frame: Vec<u8>) {
        self.entries.push((dir, frame));
    }

    pub fn entries(&self) -> &[(Direction, Vec<u8>)] {
        &self.entries
    }

    pub fn messages(&self) -> Result<Vec<(Direction, Message)>> {
        self.entries.iter().map(|(d, f)| Ok((*d, decode_frame(f)?))).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (d, f) in &self.entries {
            out.push(*d as u8);
            out.extend_from_slice(&(f.len() as u32).to_le_bytes());
            out.extend_from_slice(f);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let mut entries = Vec::new();
        while r.remaining() > 0 {
            let dir = match r.u8()? {
                0 => Direction::Up,
                1 => Direction::Down,
                b => return Err(ProtocolError::malformed(format!("bad transcript direction {b}"))),
            };
            let n = r.u32()? as usize;
            entries.push((dir, r.take(n)?.to_vec()));
        }
        Ok(Self { entries })
    }
}

/// Byte and event counters for one side of the link.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BandwidthLedger {
    pub scans: u64,
    pub requests: u64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    /// Subset of `bytes_down` carried by model chunk frames.
    pub model_bytes: u64,
}

impl BandwidthLedger {
    /// Budget constant for per-request metadata.
    pub const HEADER_OVERHEAD: u64 = META_LEN as u64;

    pub fn record_up(&mut self, bytes: u64) {
        self.bytes_up += bytes;
    }

    pub fn record_down(&mut self, bytes: u64) {
        self.bytes_down += bytes;
    }

    pub fn total(&self) -> u64 {
        self.bytes_up + self.bytes_down
    }

    pub fn total_kb(&self) -> f64 {
        self.total() as f64 / 1024.0
    }

    /// Counters accumulated after `earlier` was snapshotted.
    pub fn since(&self, earlier: &Self) -> Self {
        Self {
            scans: self.scans - earlier.scans,
            requests: self.requests - earlier.requests,
            bytes_up: self.bytes_up - earlier.bytes_up,
            bytes_down: self.bytes_down - earlier.bytes_down,
            model_bytes: self.model_bytes - earlier.model_bytes,
        }
    }
}

/// Weekly traffic budget in kilobytes:
/// `scans_per_day * (per_scan_kb + overhead_kb) * 7 + updates_per_week * model_mb * 1024`.
pub fn ledger_weekly_total(scans_per_day: u64, per_scan_kb: u64, overhead_kb: u64, updates_per_week: u64, model_mb: u64) -> u64 {
    scans_per_day * (per_scan_kb + overhead_kb) * 7 + updates_per_week * model_mb * 1024
}

//! Edge-node daemon logic: try the server, fall back to the local
//! compressed model, cache what could not be sent, and keep the local
//! model current by digest.
//!
//! Two lanes share the state. The interactive lane (scans, confirmations)
//! only ever takes short locks; the background lane (flush, update) owns
//! its own link and never blocks a scan.

pub mod cache;
mod config;
mod daemon;
mod http;
mod scanlog;

pub use cache::{CacheEntry, CacheError, Enqueued, ItemKind, PictureCache};
pub use config::{ClientConfig, ConfigError};
pub use daemon::{spawn_daemon, DaemonHandle};
pub use http::{serve_api, ApiHandle};
pub use scanlog::{ScanEntry, ScanLog};

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use cxr_core::compress::{decompress_model, CompressError, CompressedModel};
use cxr_core::dataset::ScanId;
use cxr_core::imaging::{normalize, preprocess, GrayImage, ImagingError};
use cxr_core::metrics::Class;
use cxr_core::nn::{argmax, Network, ValMetrics};
use cxr_core::Digest;
use serde::Serialize;

use crate::link::{Clock, Link, LinkError};
use crate::protocol::{
    decode_frame, encode_frame, BandwidthLedger, Confirmation, ErrorCode, FlushItem, Message, PredictRequest,
    ProtocolError, RequestMeta, CHUNK_LEN,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Server,
    Local,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Server => "server",
            Source::Local => "local",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "server" => Some(Source::Server),
            "local" => Some(Source::Local),
            _ => None,
        }
    }
}

/// Points in the download/install sequence where a crash can be injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KillPoint {
    /// After the chunk with this index was persisted to the partial file.
    AfterChunk(usize),
    BeforeVerify,
    AfterVerify,
    AfterTempWrite,
    AfterRename,
    BeforeSwap,
}

impl KillPoint {
    /// Every phase of a download of `chunks` chunks.
    pub fn all(chunks: usize) -> Vec<KillPoint> {
        let mut v: Vec<KillPoint> = (0..chunks).map(KillPoint::AfterChunk).collect();
        v.extend([
            KillPoint::BeforeVerify,
            KillPoint::AfterVerify,
            KillPoint::AfterTempWrite,
            KillPoint::AfterRename,
            KillPoint::BeforeSwap,
        ]);
        v
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("unreadable image: {0}")]
    Input(#[from] ImagingError),
    #[error("no server connection and no local model")]
    Unavailable,
    #[error("unknown scan id {0}")]
    NotFound(String),
    #[error("server error {code}: {message}")]
    Server { code: u16, message: String },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Model(#[from] CompressError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("killed at {0:?}")]
    Killed(KillPoint),
}

/// The installed compressed model, decompressed for inference.
#[derive(Debug)]
pub struct LocalModel {
    pub digest: Digest,
    pub version: u64,
    pub network: Network,
    pub metrics: ValMetrics,
    pub size: usize,
}

impl LocalModel {
    fn from_compressed(cm: &CompressedModel) -> Result<Self, CompressError> {
        let art = decompress_model(cm)?;
        Ok(Self {
            digest: cm.digest(),
            version: cm.version(),
            network: art.to_network(),
            metrics: art.metrics(),
            size: cm.as_bytes().len(),
        })
    }

    pub fn predict(&self, img: &GrayImage) -> Result<(f64, Class), ClientError> {
        let p = self
            .network
            .predict_one(&normalize(img))
            .map_err(|e| ClientError::Model(CompressError::Model(e)))?;
        let verdict = Class::from_index(argmax(&p)).unwrap_or(Class::Pneumonia);
        Ok((p[Class::Pneumonia.index()], verdict))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanResult {
    pub scan_id: String,
    pub probability: f64,
    pub verdict: Class,
    pub source: Source,
    pub model_version: u64,
    pub model_digest: String,
    pub recall: f64,
    pub precision: f64,
    /// Why the server path was not used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fallback_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfirmAck {
    pub scan_id: String,
    pub confirmed: bool,
    /// Delivered to the server now, as opposed to queued.
    pub delivered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum UpdateOutcome {
    NotChecked { reason: String },
    UpToDate,
    Installed { version: u64, digest: String, bytes: u64 },
    Partial { have: u64, total: u64 },
    Rejected { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyncReport {
    pub flushed_scans: usize,
    pub flushed_confirms: usize,
    /// Confirmations the server refused as unknown.
    pub dropped: usize,
    pub disagreements: usize,
    pub flush_error: Option<String>,
    pub update: UpdateOutcome,
    pub model_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelInfo {
    pub version: u64,
    pub digest: String,
    pub recall: f64,
    pub precision: f64,
    pub accuracy: f64,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientStatus {
    /// `None` until the first exchange.
    pub connected: Option<bool>,
    pub cache_depth: usize,
    pub pending_scans: usize,
    pub pending_confirms: usize,
    pub model: Option<ModelInfo>,
    pub ledger: BandwidthLedger,
    pub download: Option<(u64, u64)>,
    pub disagreements: usize,
    pub last_sync_ms: Option<u64>,
}

#[derive(Debug, Default)]
struct Connectivity {
    connected: Option<bool>,
    last_sync_ms: Option<u64>,
}

pub struct Client {
    cfg: ClientConfig,
    clock: Arc<dyn Clock>,
    interactive: Mutex<Box<dyn Link>>,
    background: Mutex<Box<dyn Link>>,
    model: RwLock<Option<Arc<LocalModel>>>,
    cache: Mutex<PictureCache>,
    scans: Mutex<ScanLog>,
    ledger: Mutex<BandwidthLedger>,
    conn: Mutex<Connectivity>,
    sync_lock: Mutex<()>,
    sync_wanted: AtomicBool,
    kill: Mutex<Option<KillPoint>>,
}

fn lock<T: ?Sized>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn write_synced(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut f = File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()
}

fn sync_dir(dir: &Path) {
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
}

impl Client {
    pub fn open(
        cfg: ClientConfig,
        interactive: Box<dyn Link>,
        background: Box<dyn Link>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ClientError> {
        cfg.validate().map_err(|e| ClientError::Config(e.to_string()))?;
        fs::create_dir_all(cfg.model_dir())?;
        fs::create_dir_all(cfg.scan_dir())?;
        let tmp = cfg.model_dir().join("active.tmp");
        if tmp.exists() {
            fs::remove_file(&tmp)?;
        }
        let model = load_installed(&cfg.model_dir().join("active.cxrc"));
        let cache = PictureCache::open(cfg.data_dir.join("cache.log"))?;
        let scans = ScanLog::open(cfg.data_dir.join("scans.log"))?;
        Ok(Self {
            cfg,
            clock,
            interactive: Mutex::new(interactive),
            background: Mutex::new(background),
            model: RwLock::new(model.map(Arc::new)),
            cache: Mutex::new(cache),
            scans: Mutex::new(scans),
            ledger: Mutex::new(BandwidthLedger::default()),
            conn: Mutex::new(Connectivity::default()),
            sync_lock: Mutex::new(()),
            sync_wanted: AtomicBool::new(false),
            kill: Mutex::new(None),
        })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    pub fn model(&self) -> Option<Arc<LocalModel>> {
        self.model.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn model_digest(&self) -> Option<Digest> {
        self.model().map(|m| m.digest)
    }

    pub fn ledger(&self) -> BandwidthLedger {
        *lock(&self.ledger)
    }

    pub fn cache_depth(&self) -> usize {
        lock(&self.cache).len()
    }

    pub fn cache_entries(&self) -> Vec<CacheEntry> {
        lock(&self.cache).entries().cloned().collect()
    }

    pub fn scan(&self, id: &str) -> Option<ScanEntry> {
        lock(&self.scans).get(id).cloned()
    }

    pub fn scans(&self) -> Vec<ScanEntry> {
        lock(&self.scans).entries().cloned().collect()
    }

    /// Preprocessed raster kept for an evaluated scan.
    pub fn scan_image(&self, id: &str) -> Result<GrayImage, ClientError> {
        let id = ScanId::new(id).map_err(|_| ClientError::NotFound(id.to_string()))?;
        let path = self.cfg.scan_dir().join(format!("{id}.pgm"));
        if !path.exists() {
            return Err(ClientError::NotFound(id.to_string()));
        }
        Ok(GrayImage::read_pgm(path)?)
    }

    /// A sync was requested by the server (update hint) or by a reconnect.
    pub fn take_sync_wanted(&self) -> bool {
        self.sync_wanted.swap(false, Ordering::SeqCst)
    }

    pub fn connected(&self) -> Option<bool> {
        lock(&self.conn).connected
    }

    /// Crash the next time `kp` is reached; for tests.
    pub fn inject_kill(&self, kp: Option<KillPoint>) {
        *lock(&self.kill) = kp;
    }

    fn check_kill(&self, kp: KillPoint) -> Result<(), ClientError> {
        let mut k = lock(&self.kill);
        if *k == Some(kp) {
            *k = None;
            return Err(ClientError::Killed(kp));
        }
        Ok(())
    }

    pub fn status(&self) -> ClientStatus {
        let (depth, pending_scans) = {
            let c = lock(&self.cache);
            (c.len(), c.entries().filter(|e| e.key().0 == ItemKind::Scan).count())
        };
        let conn = lock(&self.conn);
        ClientStatus {
            connected: conn.connected,
            cache_depth: depth,
            pending_scans,
            pending_confirms: depth - pending_scans,
            model: self.model().map(|m| ModelInfo {
                version: m.version,
                digest: m.digest.to_hex(),
                recall: m.metrics.recall,
                precision: m.metrics.precision,
                accuracy: m.metrics.accuracy,
                bytes: m.size,
            }),
            ledger: self.ledger(),
            download: self.partial_download(),
            disagreements: lock(&self.scans).disagreements(),
            last_sync_ms: conn.last_sync_ms,
        }
    }

    fn set_connected(&self, up: bool) {
        let mut c = lock(&self.conn);
        if up && c.connected == Some(false) {
            self.sync_wanted.store(true, Ordering::SeqCst);
        }
        c.connected = Some(up);
    }

    /// One exchange on a lane with exact byte accounting.
    fn exchange(&self, lane: &Mutex<Box<dyn Link>>, msg: &Message, timeout: std::time::Duration) -> Result<Message, ClientError> {
        let frame = encode_frame(msg)?;
        let r = lock(lane).exchange(&frame, timeout);
        let mut ledger = lock(&self.ledger);
        match r {
            Ok(resp) => {
                ledger.requests += 1;
                ledger.record_up(frame.len() as u64);
                ledger.record_down(resp.len() as u64);
                drop(ledger);
                self.set_connected(true);
                Ok(decode_frame(&resp)?)
            }
            Err(e) => {
                let (up, down) = e.partial();
                if e != LinkError::Offline {
                    ledger.requests += 1;
                }
                ledger.record_up(up);
                ledger.record_down(down);
                drop(ledger);
                self.set_connected(false);
                Err(e.into())
            }
        }
    }

    fn next_scan_id(&self, scans: &ScanLog) -> String {
        format!("{}-{:06}", self.cfg.client_id, scans.len() + 1)
    }

    fn meta(&self, scan_id: &str) -> RequestMeta {
        RequestMeta {
            scan_id: scan_id.to_string(),
            token: self.cfg.token.clone(),
            deployment: self.cfg.client_id.clone(),
            timestamp_ms: self.clock.now_ms(),
            client_model: self.model_digest().unwrap_or_default(),
        }
    }

    /// Preprocess a raw image once, then predict on the server or, failing
    /// that, locally with the scan queued for upload.
    pub fn handle_scan(&self, raw: &GrayImage) -> Result<ScanResult, ClientError> {
        let img = preprocess(raw, &self.cfg.preprocess)?;
        // the id is claimed under the log lock so concurrent scans never collide
        let scan_id = {
            let mut scans = lock(&self.scans);
            let id = self.next_scan_id(&scans);
            scans.reserve(&id)?;
            id
        };
        img.write_pgm(self.cfg.scan_dir().join(format!("{scan_id}.pgm")))?;
        lock(&self.ledger).scans += 1;
        let request = PredictRequest { meta: self.meta(&scan_id), image: img.data().to_vec() };

        let reason = match self.exchange(&self.interactive, &Message::PredictReq(request.clone()), self.cfg.predict_timeout) {
            Ok(Message::PredictResp(r)) if r.scan_id == scan_id => {
                if r.update_hint {
                    self.sync_wanted.store(true, Ordering::SeqCst);
                }
                let result = ScanResult {
                    scan_id: scan_id.clone(),
                    probability: r.probability as f64,
                    verdict: r.verdict,
                    source: Source::Server,
                    model_version: r.model_version,
                    model_digest: r.model_digest.to_hex(),
                    recall: r.recall as f64,
                    precision: r.precision as f64,
                    fallback_reason: None,
                };
                lock(&self.scans).record(ScanEntry::new(&result, self.clock.now_ms()))?;
                return Ok(result);
            }
            Ok(Message::Error { code, message }) => format!("server error {code}: {message}"),
            Ok(other) => format!("unexpected {:?} reply", other.msg_type()),
            Err(e) => e.to_string(),
        };

        let model = self.model().ok_or(ClientError::Unavailable)?;
        let (p, verdict) = model.predict(&img)?;
        let item = FlushItem::Scan {
            request,
            local_probability: p as f32,
            local_verdict: verdict,
            local_version: model.version,
        };
        lock(&self.cache).push(item, self.clock.now_ms())?;
        let result = ScanResult {
            scan_id,
            probability: p,
            verdict,
            source: Source::Local,
            model_version: model.version,
            model_digest: model.digest.to_hex(),
            recall: model.metrics.recall,
            precision: model.metrics.precision,
            fallback_reason: Some(reason),
        };
        lock(&self.scans).record(ScanEntry::new(&result, self.clock.now_ms()))?;
        Ok(result)
    }

    /// Record the user's confirmation or rejection of a verdict. Sent
    /// directly when nothing is queued ahead of it, otherwise queued behind
    /// the scans so the server always sees a scan before its label.
    pub fn record_confirmation(&self, scan_id: &str, confirmed: bool) -> Result<ConfirmAck, ClientError> {
        let verdict = {
            let mut scans = lock(&self.scans);
            let entry = scans.get(scan_id).ok_or_else(|| ClientError::NotFound(scan_id.to_string()))?;
            let v = entry.verdict;
            scans.confirm(scan_id, confirmed)?;
            v
        };
        let c = Confirmation { scan_id: scan_id.to_string(), confirmed, verdict };
        let ack = |delivered| ConfirmAck { scan_id: scan_id.to_string(), confirmed, delivered };
        if !lock(&self.cache).is_empty() {
            lock(&self.cache).push(FlushItem::Confirm(c), self.clock.now_ms())?;
            return Ok(ack(false));
        }
        match self.exchange(&self.interactive, &Message::ConfirmReq(c.clone()), self.cfg.predict_timeout) {
            Ok(Message::Ack { .. }) => Ok(ack(true)),
            Ok(Message::Error { code, message }) if code == ErrorCode::NotFound as u16 => {
                Err(ClientError::Server { code, message })
            }
            _ => {
                lock(&self.cache).push(FlushItem::Confirm(c), self.clock.now_ms())?;
                Ok(ack(false))
            }
        }
    }

    /// Flush the cache, check for a newer model, and download and install
    /// it if there is one.
    pub fn sync_cycle(&self) -> Result<SyncReport, ClientError> {
        let _one = lock(&self.sync_lock);
        let mut report = SyncReport {
            flushed_scans: 0,
            flushed_confirms: 0,
            dropped: 0,
            disagreements: 0,
            flush_error: None,
            update: UpdateOutcome::NotChecked { reason: "flush failed".into() },
            model_bytes: 0,
        };
        let flushed = self.flush(&mut report);
        lock(&self.conn).last_sync_ms = Some(self.clock.now_ms());
        if let Err(e) = flushed {
            if matches!(e, ClientError::Killed(_)) {
                return Err(e);
            }
            report.flush_error = Some(e.to_string());
            return Ok(report);
        }
        report.update = self.update(&mut report)?;
        Ok(report)
    }

    fn flush(&self, report: &mut SyncReport) -> Result<(), ClientError> {
        loop {
            let Some(entry) = lock(&self.cache).front().cloned() else { return Ok(()) };
            let (kind, id) = (ItemKind::of(&entry.item), cache::item_id(&entry.item).to_string());
            let reply = self.exchange(&self.background, &Message::FlushBatch(entry.item.clone()), self.cfg.flush_timeout)?;
            match (&entry.item, reply) {
                (FlushItem::Scan { local_verdict, .. }, Message::PredictResp(r)) if r.scan_id == id => {
                    let disagree = r.verdict != *local_verdict;
                    lock(&self.scans).rescore(&id, r.probability as f64, r.verdict, r.model_version)?;
                    if disagree {
                        log::warn!("scan {id}: local verdict {local_verdict} but server says {}", r.verdict);
                        report.disagreements += 1;
                    }
                    report.flushed_scans += 1;
                }
                (FlushItem::Confirm(_), Message::Ack { .. }) => report.flushed_confirms += 1,
                (FlushItem::Confirm(_), Message::Error { code, message }) if code == ErrorCode::NotFound as u16 => {
                    log::warn!("server does not know scan {id}, dropping its confirmation: {message}");
                    report.dropped += 1;
                }
                (_, Message::Error { code, message }) => return Err(ClientError::Server { code, message }),
                (_, other) => {
                    return Err(ClientError::Protocol(ProtocolError::new(
                        ErrorCode::Malformed,
                        format!("unexpected {:?} reply to flush", other.msg_type()),
                    )))
                }
            }
            lock(&self.cache).remove(kind, &id)?;
        }
    }

    fn part_paths(&self) -> (PathBuf, PathBuf) {
        let d = self.cfg.model_dir();
        (d.join("download.part"), d.join("download.meta"))
    }

    fn discard_partial(&self) {
        let (part, meta) = self.part_paths();
        let _ = fs::remove_file(part);
        let _ = fs::remove_file(meta);
    }

    /// `(have, total)` of an unfinished download.
    pub fn partial_download(&self) -> Option<(u64, u64)> {
        let (part, meta) = self.part_paths();
        let m = fs::read_to_string(meta).ok()?;
        let total = m.split_whitespace().nth(1)?.parse().ok()?;
        Some((fs::metadata(part).map(|m| m.len()).unwrap_or(0), total))
    }

    fn update(&self, report: &mut SyncReport) -> Result<UpdateOutcome, ClientError> {
        let digest = self.model_digest().unwrap_or_default();
        let reply = match self.exchange(&self.background, &Message::UpdateCheck { digest }, self.cfg.flush_timeout) {
            Ok(m) => m,
            Err(ClientError::Link(e)) => return Ok(UpdateOutcome::NotChecked { reason: e.to_string() }),
            Err(e) => return Err(e),
        };
        let (target, size, version) = match reply {
            Message::UpdateNone => {
                self.discard_partial();
                return Ok(UpdateOutcome::UpToDate);
            }
            Message::UpdateAvail { digest, size, version } => (digest, size, version),
            Message::Error { code, message } => return Ok(UpdateOutcome::NotChecked { reason: format!("server error {code}: {message}") }),
            other => return Ok(UpdateOutcome::NotChecked { reason: format!("unexpected {:?} reply", other.msg_type()) }),
        };
        let bytes = match self.download(target, size, report)? {
            Ok(b) => b,
            Err(outcome) => return Ok(outcome),
        };
        self.install(target, version, bytes)
    }

    /// Resume or start the download of `target`. The inner error is the
    /// outcome to report when the transfer did not complete.
    fn download(&self, target: Digest, size: u64, report: &mut SyncReport) -> Result<Result<Vec<u8>, UpdateOutcome>, ClientError> {
        let (part, meta) = self.part_paths();
        let want_meta = format!("{target} {size}\n");
        if fs::read_to_string(&meta).ok().as_deref() != Some(want_meta.as_str()) {
            self.discard_partial();
            write_synced(&meta, want_meta.as_bytes())?;
        }
        let mut have = fs::metadata(&part).map(|m| m.len()).unwrap_or(0);
        if have > size {
            have = 0;
        }
        // only whole chunks count as acknowledged
        if have < size {
            have -= have % CHUNK_LEN as u64;
        }
        let mut file = fs::OpenOptions::new().create(true).write(true).truncate(false).open(&part)?;
        file.set_len(have)?;
        use std::io::Seek;
        file.seek(std::io::SeekFrom::Start(have))?;

        while have < size {
            let offsets: Vec<u64> =
                (have..size).step_by(CHUNK_LEN).take(self.cfg.window.max(1)).collect();
            let frames = offsets
                .iter()
                .map(|&offset| encode_frame(&Message::ModelChunk { digest: target, offset, data: Vec::new() }))
                .collect::<Result<Vec<_>, _>>()?;
            let results = lock(&self.background).exchange_window(&frames, self.cfg.chunk_timeout);
            for ((frame, &offset), r) in frames.iter().zip(&offsets).zip(results) {
                let resp = match r {
                    Ok(resp) => resp,
                    Err(e) => {
                        let (up, down) = e.partial();
                        let mut l = lock(&self.ledger);
                        if e != LinkError::Offline {
                            l.requests += 1;
                        }
                        l.record_up(up);
                        l.record_down(down);
                        l.model_bytes += down;
                        report.model_bytes += down;
                        drop(l);
                        self.set_connected(false);
                        return Ok(Err(UpdateOutcome::Partial { have, total: size }));
                    }
                };
                {
                    let mut l = lock(&self.ledger);
                    l.requests += 1;
                    l.record_up(frame.len() as u64);
                    l.record_down(resp.len() as u64);
                    l.model_bytes += resp.len() as u64;
                }
                report.model_bytes += resp.len() as u64;
                self.set_connected(true);
                let expect = (size - offset).min(CHUNK_LEN as u64) as usize;
                match decode_frame(&resp)? {
                    Message::ModelChunk { digest, offset: o, data } if digest == target && o == offset && data.len() == expect => {
                        file.write_all(&data)?;
                        file.sync_data()?;
                        have += data.len() as u64;
                        self.check_kill(KillPoint::AfterChunk((offset / CHUNK_LEN as u64) as usize))?;
                    }
                    Message::Error { code, message } if code == ErrorCode::NotFound as u16 => {
                        self.discard_partial();
                        return Ok(Err(UpdateOutcome::Rejected { reason: message }));
                    }
                    other => {
                        log::warn!("bad chunk reply at offset {offset}: {:?}", other.msg_type());
                        return Ok(Err(UpdateOutcome::Partial { have, total: size }));
                    }
                }
            }
        }
        drop(file);
        Ok(Ok(fs::read(&part)?))
    }

    /// Verify a complete download and make it the active model. Every
    /// step before the rename leaves the old model in place; the rename is
    /// the commit.
    fn install(&self, target: Digest, version: u64, bytes: Vec<u8>) -> Result<UpdateOutcome, ClientError> {
        self.check_kill(KillPoint::BeforeVerify)?;
        let verified = CompressedModel::from_bytes(&bytes).and_then(|cm| {
            if cm.digest() != target {
                return Err(CompressError::Corrupt { expected: target, actual: cm.digest() });
            }
            let local = LocalModel::from_compressed(&cm)?;
            Ok(local)
        });
        let local = match verified {
            Ok(l) => l,
            Err(e) => {
                log::error!("downloaded model failed verification: {e}");
                self.discard_partial();
                return Ok(UpdateOutcome::Rejected { reason: e.to_string() });
            }
        };
        self.check_kill(KillPoint::AfterVerify)?;
        let dir = self.cfg.model_dir();
        let tmp = dir.join("active.tmp");
        write_synced(&tmp, &bytes)?;
        self.check_kill(KillPoint::AfterTempWrite)?;
        fs::rename(&tmp, dir.join("active.cxrc"))?;
        sync_dir(&dir);
        self.check_kill(KillPoint::AfterRename)?;
        self.discard_partial();
        self.check_kill(KillPoint::BeforeSwap)?;
        let bytes_len = bytes.len() as u64;
        *self.model.write().unwrap_or_else(|e| e.into_inner()) = Some(Arc::new(local));
        log::info!("installed model v{version} ({})", target.short());
        Ok(UpdateOutcome::Installed { version, digest: target.to_hex(), bytes: bytes_len })
    }
}

/// Load and fully verify the installed model; a file that fails is set
/// aside rather than used.
fn load_installed(path: &Path) -> Option<LocalModel> {
    if !path.exists() {
        return None;
    }
    let r = CompressedModel::read(path).and_then(|cm| LocalModel::from_compressed(&cm));
    match r {
        Ok(m) => Some(m),
        Err(e) => {
            log::error!("installed model {} is unusable: {e}", path.display());
            let _ = fs::rename(path, path.with_extension("corrupt"));
            None
        }
    }
}

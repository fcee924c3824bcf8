//! Central service: full-model predictions, scan ingestion, the model
//! registry and the retrain-evaluate-replace loop.

mod registry;
mod tcp;

pub use registry::{ModelRegistry, RegistryEntry};
pub use tcp::{serve_tcp, TcpServerHandle};

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use cxr_core::compress::{compress_model, compress_model_with, masked_fine_tune, CompressError, CompressedModel, CompressionConfig};
use cxr_core::dataset::{DatasetError, IngestAck, Label, Sample, ScanId, ScanRecord, ScanStore, Section, SCAN_SIDE};
use cxr_core::imaging::{normalize, GrayImage};
use cxr_core::metrics::{f_beta, Class};
use cxr_core::nn::{argmax, measure, transfer_retrain, Example, ModelArtifact, Network, NnError, RetrainOutcome, TrainConfig, ValMetrics};
use cxr_core::par::Exec;
use cxr_core::Digest;
use serde::Serialize;

use crate::link::Endpoint;
use crate::protocol::{
    decode_frame, encode_frame, Confirmation, ErrorCode, FlushItem, Message, PredictRequest, PredictResponse, CHUNK_LEN,
};

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("registry: {0}")]
    Registry(String),
    #[error("digest mismatch in {0}; refusing to load")]
    Tampered(String),
    #[error("no active model")]
    NoActiveModel,
    #[error("no frozen held-out set; retraining needs one")]
    NoHeldOut,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Compress(#[from] CompressError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum PolicyMetric {
    FBeta { beta: f64 },
    Accuracy,
}

impl PolicyMetric {
    pub fn score(&self, m: &ValMetrics) -> f64 {
        match *self {
            PolicyMetric::FBeta { beta } => f_beta(m.precision, m.recall, beta),
            PolicyMetric::Accuracy => m.accuracy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RetrainPolicy {
    /// Minimum labeled update-batch size that triggers a retrain.
    pub threshold: usize,
    pub metric: PolicyMetric,
}

impl Default for RetrainPolicy {
    fn default() -> Self {
        Self { threshold: 100, metric: PolicyMetric::FBeta { beta: 2.0 } }
    }
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub root: PathBuf,
    /// Section for scans ingested through predictions.
    pub default_section: Section,
    pub compression: CompressionConfig,
    /// Masked retraining between pruning and quantization of retrained
    /// candidates; `None` compresses one-shot.
    pub fine_tune: Option<TrainConfig>,
    pub retrain: TrainConfig,
    pub policy: RetrainPolicy,
}

impl ServerConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            default_section: Section::Private,
            compression: CompressionConfig::default(),
            fine_tune: Some(TrainConfig { epochs: 2, patience: 2, batch_size: 32, ..TrainConfig::default() }),
            retrain: TrainConfig { epochs: 5, patience: 3, batch_size: 32, ..TrainConfig::default() },
            policy: RetrainPolicy::default(),
        }
    }
}

/// The model requests are served with; swapped as a whole.
#[derive(Debug)]
pub struct ActiveModel {
    pub version: u64,
    pub artifact: ModelArtifact,
    pub network: Network,
    pub compressed: CompressedModel,
}

impl ActiveModel {
    fn new(artifact: ModelArtifact, compressed: CompressedModel) -> Self {
        Self { version: artifact.version(), network: artifact.to_network(), artifact, compressed }
    }

    pub fn compressed_digest(&self) -> Digest {
        self.compressed.digest()
    }

    /// Pneumonia probability and verdict for a preprocessed scan.
    pub fn predict(&self, img: &GrayImage) -> Result<(f64, Class), NnError> {
        let p = self.network.predict_one(&normalize(img))?;
        let verdict = Class::from_index(argmax(&p)).unwrap_or(Class::Pneumonia);
        Ok((p[Class::Pneumonia.index()], verdict))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum RetrainReport {
    BelowThreshold { batch: usize, threshold: usize },
    Retained { batch: usize, version: u64, active_score: f64, candidate_score: f64 },
    Replaced { batch: usize, from: u64, to: u64, active_score: f64, candidate_score: f64 },
    Diverged { batch: usize, version: u64, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PublishReport {
    pub version: u64,
    pub model_digest: String,
    pub compressed_digest: String,
    pub original_bytes: usize,
    pub compressed_bytes: usize,
}

pub struct Server {
    cfg: ServerConfig,
    active: RwLock<Option<Arc<ActiveModel>>>,
    registry: Mutex<ModelRegistry>,
    store: Mutex<ScanStore>,
    /// First response per scan id, replayed to duplicates.
    responses: Mutex<HashMap<String, PredictResponse>>,
    held_out: Vec<Sample>,
    job: Mutex<()>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn held_out_dir(root: &Path) -> PathBuf {
    root.join("heldout")
}

impl Server {
    /// Open or create the server state under `cfg.root`. The held-out set
    /// is frozen on first start; later starts load it from disk and ignore
    /// `held_out`.
    pub fn open(cfg: ServerConfig, held_out: Option<Vec<Sample>>) -> Result<Self, ServerError> {
        fs::create_dir_all(&cfg.root)?;
        let registry = ModelRegistry::open(cfg.root.join("registry"))?;
        let store = ScanStore::open(cfg.root.join("store"))?;
        let dir = held_out_dir(&cfg.root);
        let held_out = if dir.is_dir() {
            if held_out.is_some() {
                log::info!("held-out set already frozen under {}; ignoring the supplied one", dir.display());
            }
            cxr_core::dataset::load_labeled_dir(&dir, SCAN_SIDE)?
        } else if let Some(set) = held_out {
            freeze_held_out(&dir, &set)?;
            set
        } else {
            Vec::new()
        };
        let active = match registry.active() {
            Some(e) => {
                let (art, cm) = registry.load(e.version)?;
                Some(Arc::new(ActiveModel::new(art, cm)))
            }
            None => None,
        };
        Ok(Self {
            cfg,
            active: RwLock::new(active),
            registry: Mutex::new(registry),
            store: Mutex::new(store),
            responses: Mutex::new(HashMap::new()),
            held_out,
            job: Mutex::new(()),
        })
    }

    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    pub fn active(&self) -> Option<Arc<ActiveModel>> {
        self.active.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn swap(&self, model: ActiveModel) {
        *self.active.write().unwrap_or_else(|e| e.into_inner()) = Some(Arc::new(model));
    }

    pub fn held_out(&self) -> &[Sample] {
        &self.held_out
    }

    pub fn registry(&self) -> MutexGuard<'_, ModelRegistry> {
        lock(&self.registry)
    }

    pub fn store(&self) -> MutexGuard<'_, ScanStore> {
        lock(&self.store)
    }

    /// Register `artifact` with a freshly compressed counterpart and make
    /// it active. A version number already taken is replaced by the next
    /// free one.
    pub fn publish(&self, artifact: &ModelArtifact) -> Result<PublishReport, ServerError> {
        let _job = lock(&self.job);
        let existing = self.registry().by_model(&artifact.digest()).copied();
        let entry = match existing {
            Some(e) => e,
            None => {
                let next = self.registry().next_version();
                let art = if artifact.version() < next {
                    artifact.reseal(next, artifact.parent(), artifact.metrics())
                } else {
                    artifact.clone()
                };
                let cm = compress_model(&art, &self.cfg.compression)?;
                self.registry().register(&art, &cm)?
            }
        };
        self.activate_locked(entry.version)
    }

    /// Make a registered version active again.
    pub fn activate(&self, version: u64) -> Result<PublishReport, ServerError> {
        let _job = lock(&self.job);
        self.activate_locked(version)
    }

    pub fn rollback(&self) -> Result<PublishReport, ServerError> {
        let _job = lock(&self.job);
        let e = self.registry().rollback()?;
        self.load_active(e.version)
    }

    fn activate_locked(&self, version: u64) -> Result<PublishReport, ServerError> {
        self.registry().activate(version)?;
        self.load_active(version)
    }

    fn load_active(&self, version: u64) -> Result<PublishReport, ServerError> {
        let (art, cm) = self.registry().load(version)?;
        let report = PublishReport {
            version,
            model_digest: art.digest().to_hex(),
            compressed_digest: cm.digest().to_hex(),
            original_bytes: cm.original_size(),
            compressed_bytes: cm.compressed_size(),
        };
        self.swap(ActiveModel::new(art, cm));
        log::info!("active model is now v{version}");
        Ok(report)
    }

    pub fn export_public(&self, dir: impl AsRef<Path>) -> Result<usize, ServerError> {
        Ok(self.store().export_public(dir)?.len())
    }

    /// Answer one decoded request.
    pub fn handle(&self, msg: Message) -> Message {
        let result = match msg {
            Message::PredictReq(req) => self.predict(&req),
            Message::FlushBatch(FlushItem::Scan { request, local_verdict, local_version, .. }) => {
                log::debug!("flushed scan {} (local verdict {local_verdict} from v{local_version})", request.meta.scan_id);
                self.predict(&request)
            }
            Message::ConfirmReq(c) | Message::FlushBatch(FlushItem::Confirm(c)) => self.confirm(&c),
            Message::UpdateCheck { digest } => self.update_check(digest),
            Message::ModelChunk { digest, offset, data } if data.is_empty() => self.chunk(digest, offset),
            other => Err(Message::error(ErrorCode::Malformed, format!("unexpected {:?} request", other.msg_type()))),
        };
        result.unwrap_or_else(|e| e)
    }

    fn predict(&self, req: &PredictRequest) -> Result<Message, Message> {
        let id = ScanId::new(req.meta.scan_id.as_str()).map_err(|e| Message::error(ErrorCode::Malformed, e.to_string()))?;
        if let Some(r) = lock(&self.responses).get(id.as_str()) {
            return Ok(Message::PredictResp(r.clone()));
        }
        let img = GrayImage::new(SCAN_SIDE, SCAN_SIDE, req.image.clone())
            .map_err(|e| Message::error(ErrorCode::Malformed, e.to_string()))?;
        // one snapshot serves the whole request
        let model = self.active().ok_or_else(|| Message::error(ErrorCode::Unavailable, "no active model"))?;
        let (p, verdict) = model.predict(&img).map_err(|e| Message::error(ErrorCode::Internal, e.to_string()))?;
        let m = model.artifact.metrics();
        let resp = PredictResponse {
            scan_id: id.as_str().to_string(),
            probability: p as f32,
            verdict,
            model_version: model.version,
            model_digest: model.compressed_digest(),
            recall: m.recall as f32,
            precision: m.precision as f32,
            update_hint: req.meta.client_model != model.compressed_digest(),
        };
        let mut responses = lock(&self.responses);
        if let Some(r) = responses.get(id.as_str()) {
            return Ok(Message::PredictResp(r.clone()));
        }
        let rec = ScanRecord::new(id.clone(), img, Label::Unlabeled, self.cfg.default_section);
        match self.store().ingest(rec) {
            Ok(IngestAck::Inserted) => {}
            Ok(IngestAck::Duplicate) => log::debug!("scan {id} was already stored"),
            Err(e) => return Err(Message::error(ErrorCode::Internal, e.to_string())),
        }
        responses.insert(id.as_str().to_string(), resp.clone());
        Ok(Message::PredictResp(resp))
    }

    fn confirm(&self, c: &Confirmation) -> Result<Message, Message> {
        let id = ScanId::new(c.scan_id.as_str()).map_err(|e| Message::error(ErrorCode::Malformed, e.to_string()))?;
        match self.store().confirm(&id, c.confirmed, c.verdict) {
            Ok(()) => Ok(Message::Ack { scan_id: Some(c.scan_id.clone()) }),
            Err(DatasetError::NotFound(_)) => Err(Message::error(ErrorCode::NotFound, format!("unknown scan {id}"))),
            Err(e) => Err(Message::error(ErrorCode::Internal, e.to_string())),
        }
    }

    fn update_check(&self, digest: Digest) -> Result<Message, Message> {
        let model = self.active().ok_or_else(|| Message::error(ErrorCode::Unavailable, "no active model"))?;
        if digest == model.compressed_digest() {
            return Ok(Message::UpdateNone);
        }
        Ok(Message::UpdateAvail {
            digest: model.compressed_digest(),
            size: model.compressed.as_bytes().len() as u64,
            version: model.version,
        })
    }

    fn chunk(&self, digest: Digest, offset: u64) -> Result<Message, Message> {
        let model = self.active().ok_or_else(|| Message::error(ErrorCode::Unavailable, "no active model"))?;
        if digest != model.compressed_digest() {
            return Err(Message::error(ErrorCode::NotFound, "requested model is no longer offered"));
        }
        let bytes = model.compressed.as_bytes();
        let start = offset as usize;
        if start >= bytes.len() {
            return Err(Message::error(ErrorCode::Malformed, format!("offset {offset} past end {}", bytes.len())));
        }
        let end = (start + CHUNK_LEN).min(bytes.len());
        Ok(Message::ModelChunk { digest, offset, data: bytes[start..end].to_vec() })
    }

    /// Retrain on the update batch if it is large enough, and replace the
    /// active model only if the candidate scores strictly better on the
    /// frozen held-out set. The batch is marked used either way.
    pub fn retrain_and_maybe_replace(&self) -> Result<RetrainReport, ServerError> {
        let _job = lock(&self.job);
        let (update, used): (Vec<Sample>, Vec<Sample>) = {
            let store = self.store();
            let u = store.update_batch().into_iter().filter_map(Sample::from_record).collect();
            let d = store.used_batch().into_iter().filter_map(Sample::from_record).collect();
            (u, d)
        };
        let threshold = self.cfg.policy.threshold.max(1);
        if update.len() < threshold {
            return Ok(RetrainReport::BelowThreshold { batch: update.len(), threshold });
        }
        if self.held_out.is_empty() {
            return Err(ServerError::NoHeldOut);
        }
        let active = self.active().ok_or(ServerError::NoActiveModel)?;
        let ids: Vec<ScanId> = update.iter().map(|s| s.id.clone()).collect();
        let to_ex = |v: &[Sample]| v.iter().map(Sample::to_example).collect::<Vec<Example>>();
        let (update_ex, used_ex, held_ex) = (to_ex(&update), to_ex(&used), to_ex(&self.held_out));

        let outcome = transfer_retrain(&active.artifact, &used_ex, &update_ex, &held_ex, &self.cfg.retrain);
        let report = match outcome {
            Err(e) => {
                log::error!("retrain from v{} failed: {e}; keeping the active model", active.version);
                RetrainReport::Diverged { batch: ids.len(), version: active.version, reason: e.to_string() }
            }
            Ok(RetrainOutcome::Skipped) => unreachable!("update batch is non-empty"),
            Ok(RetrainOutcome::Trained { artifact, .. }) => {
                let metric = self.cfg.policy.metric;
                let active_metrics = measure(&active.network, &held_ex)?;
                let cand_metrics = measure(&artifact.to_network(), &held_ex)?;
                let (a, c) = (metric.score(&active_metrics), metric.score(&cand_metrics));
                if c > a {
                    let version = self.registry().next_version();
                    let cand = artifact.reseal(version, Some(active.artifact.digest()), cand_metrics);
                    let mut train_ex = used_ex;
                    train_ex.extend(update_ex);
                    let cm = match &self.cfg.fine_tune {
                        Some(ft) => compress_model_with(
                            &cand,
                            &self.cfg.compression,
                            Exec::default(),
                            masked_fine_tune(&train_ex, &held_ex, ft),
                        )?,
                        None => compress_model(&cand, &self.cfg.compression)?,
                    };
                    self.registry().register(&cand, &cm)?;
                    self.activate_locked(version)?;
                    RetrainReport::Replaced { batch: ids.len(), from: active.version, to: version, active_score: a, candidate_score: c }
                } else {
                    RetrainReport::Retained { batch: ids.len(), version: active.version, active_score: a, candidate_score: c }
                }
            }
        };
        self.store().mark_used(&ids)?;
        Ok(report)
    }
}

fn freeze_held_out(dir: &Path, set: &[Sample]) -> Result<(), ServerError> {
    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    let sub = |c: Class| c.name().to_ascii_lowercase();
    for class in [Class::Normal, Class::Pneumonia] {
        fs::create_dir_all(tmp.join(sub(class)))?;
    }
    for s in set {
        s.image.write_pgm(tmp.join(sub(s.class)).join(format!("{}.pgm", s.id))).map_err(DatasetError::from)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

impl Endpoint for Server {
    fn handle_frame(&self, frame: &[u8]) -> Vec<u8> {
        let reply = match decode_frame(frame) {
            Ok(msg) => self.handle(msg),
            Err(e) => Message::Error { code: e.code as u16, message: e.to_string() },
        };
        encode_frame(&reply).unwrap_or_else(|e| {
            encode_frame(&Message::error(ErrorCode::Internal, e.to_string())).expect("error frame encodes")
        })
    }
}

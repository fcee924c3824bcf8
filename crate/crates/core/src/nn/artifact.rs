//! Sealed model artifacts and their `CXRM` binary encoding.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CXRM" | u16 format version | u32 layer count
//! u32 input rank | u32 dims...
//! u64 model version | u8 has parent | [32] parent digest
//! f64 val loss | f64 accuracy | f64 precision | f64 recall
//! per layer: u8 kind | u32 | u32 | u32          (kind-specific parameters)
//! u32 tensor count | per tensor: u32 rank | u32 dims... | f32 values...
//! [32] SHA-256 of every preceding byte
//! ```

use serde::{Deserialize, Serialize};

use super::layers::LayerSpec;
use super::network::Network;
use super::train::{evaluate, train, Example, TrainConfig};
use super::NnError;
use crate::digest::Digest;
use crate::par::Exec;
use crate::tensor::Tensor;
use crate::wire::{Reader, Writer};

pub const MODEL_MAGIC: &[u8; 4] = b"CXRM";
pub const MODEL_FORMAT_VERSION: u16 = 1;

/// Held-out metrics stored alongside the weights. Precision and recall are
/// for the positive (pneumonia) class.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ValMetrics {
    pub val_loss: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<Tensor>,
    version: u64,
    parent: Option<Digest>,
    metrics: ValMetrics,
    digest: Digest,
}

impl ModelArtifact {
    /// Freeze a network. Parameters are rounded to `f32`, the storage type.
    pub fn seal(network: &Network, version: u64, parent: Option<Digest>, metrics: ValMetrics) -> Self {
        let mut net = network.clone();
        net.round_to_f32();
        let mut art = Self {
            input_shape: net.input_shape().to_vec(),
            layers: net.layers().to_vec(),
            params: net.into_params(),
            version,
            parent,
            metrics,
            digest: Digest::default(),
        };
        art.digest = Digest::of(&art.body_bytes());
        art
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn parent(&self) -> Option<Digest> {
        self.parent
    }

    pub fn metrics(&self) -> ValMetrics {
        self.metrics
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    pub fn to_network(&self) -> Network {
        Network::with_params(self.input_shape.clone(), self.layers.clone(), self.params.clone())
            .expect("sealed artifacts are shape-consistent")
    }

    /// Same weights and lineage under a new version and metrics.
    pub fn reseal(&self, version: u64, parent: Option<Digest>, metrics: ValMetrics) -> Self {
        Self::seal(&self.to_network(), version, parent, metrics)
    }

    pub(crate) fn header_bytes(&self, w: &mut Writer) {
        w.bytes(MODEL_MAGIC).u16(MODEL_FORMAT_VERSION).u32(self.layers.len() as u32);
        w.u32(self.input_shape.len() as u32);
        for &d in &self.input_shape {
            w.u32(d as u32);
        }
        w.u64(self.version);
        match self.parent {
            Some(p) => w.u8(1).bytes(p.as_bytes()),
            None => w.u8(0).bytes(&[0u8; 32]),
        };
        w.f64(self.metrics.val_loss)
            .f64(self.metrics.accuracy)
            .f64(self.metrics.precision)
            .f64(self.metrics.recall);
        for spec in &self.layers {
            let (kind, a, b, c) = encode_spec(spec);
            w.u8(kind).u32(a).u32(b).u32(c);
        }
    }

    fn body_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.header_bytes(&mut w);
        w.u32(self.params.len() as u32);
        for t in &self.params {
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            for &v in t.data() {
                w.f32(v as f32);
            }
        }
        w.finish()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = self.body_bytes();
        body.extend_from_slice(self.digest.as_bytes());
        body
    }

    pub fn byte_len(&self) -> usize {
        self.to_bytes().len()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        if bytes.len() < 32 {
            return Err(NnError::Format("artifact shorter than its digest".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 32);
        let stored = Digest::from_slice(tail).expect("32 bytes");
        let actual = Digest::of(body);
        if stored != actual {
            return Err(NnError::DigestMismatch { expected: stored, actual });
        }
        let mut r = Reader::new(body);
        let (input_shape, layers, version, parent, metrics) = read_header(&mut r)?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            params.push(Tensor::new(shape, data)?);
        }
        if r.remaining() != 0 {
            return Err(NnError::Format(format!("{} trailing bytes", r.remaining())));
        }
        // validates shapes against the layer stack
        Network::with_params(input_shape.clone(), layers.clone(), params.clone())?;
        Ok(Self { input_shape, layers, params, version, parent, metrics, digest: stored })
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self, NnError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<std::path::Path>) -> Result<(), NnError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

type Header = (Vec<usize>, Vec<LayerSpec>, u64, Option<Digest>, ValMetrics);

pub(crate) fn read_header(r: &mut Reader<'_>) -> Result<Header, NnError> {
    let magic = r.array::<4>()?;
    if &magic != MODEL_MAGIC {
        return Err(NnError::Format(format!("bad magic {magic:?}")));
    }
    let fv = r.u16()?;
    if fv != MODEL_FORMAT_VERSION {
        return Err(NnError::Format(format!("unsupported format version {fv}")));
    }
    let layer_count = r.u32()? as usize;
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(NnError::Format(format!("input rank {rank} too large")));
    }
    let input_shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
    let version = r.u64()?;
    let has_parent = r.u8()?;
    let parent_bytes = r.array::<32>()?;
    let parent = (has_parent == 1).then_some(Digest(parent_bytes));
    let metrics = ValMetrics { val_loss: r.f64()?, accuracy: r.f64()?, precision: r.f64()?, recall: r.f64()? };
    let mut layers = Vec::with_capacity(layer_count.min(1024));
    for _ in 0..layer_count {
        let kind = r.u8()?;
        let (a, b, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        layers.push(decode_spec(kind, a, b, c)?);
    }
    Ok((input_shape, layers, version, parent, metrics))
}

fn encode_spec(spec: &LayerSpec) -> (u8, u32, u32, u32) {
    match *spec {
        LayerSpec::Conv2d { filters, kernel, stride } => (1, filters as u32, kernel as u32, stride as u32),
        LayerSpec::MaxPool2d { size } => (2, size as u32, 0, 0),
        LayerSpec::Relu => (3, 0, 0, 0),
        LayerSpec::Flatten => (4, 0, 0, 0),
        LayerSpec::Dense { units } => (5, units as u32, 0, 0),
        LayerSpec::Softmax => (6, 0, 0, 0),
    }
}

fn decode_spec(kind: u8, a: usize, b: usize, c: usize) -> Result<LayerSpec, NnError> {
    Ok(match kind {
        1 => LayerSpec::Conv2d { filters: a, kernel: b, stride: c },
        2 => LayerSpec::MaxPool2d { size: a },
        3 => LayerSpec::Relu,
        4 => LayerSpec::Flatten,
        5 => LayerSpec::Dense { units: a },
        6 => LayerSpec::Softmax,
        other => return Err(NnError::Format(format!("unknown layer kind {other}"))),
    })
}

/// Metrics of a network on labeled examples, positive class = 1.
pub fn measure(net: &Network, examples: &[Example]) -> Result<ValMetrics, NnError> {
    let eval = evaluate(net, examples, Exec::default())?;
    let preds = eval.predictions();
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, e) in preds.iter().zip(examples) {
        match (e.label == 1, *p == 1) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    Ok(ValMetrics { val_loss: eval.loss, accuracy: eval.accuracy, precision: ratio(tp, fp), recall: ratio(tp, fn_) })
}

#[derive(Debug)]
pub enum RetrainOutcome {
    Trained { artifact: ModelArtifact, history: Vec<super::train::EpochRecord> },
    /// The update batch was empty; nothing was trained.
    Skipped,
}

/// Continue training from `base` on previously used data plus the new
/// update batch. The result carries fresh validation metrics, a version one
/// above `base`, and `base`'s digest as parent.
pub fn transfer_retrain(
    base: &ModelArtifact,
    used: &[Example],
    update: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
) -> Result<RetrainOutcome, NnError> {
    if update.is_empty() {
        log::warn!("transfer retrain requested with an empty update batch; keeping v{}", base.version());
        return Ok(RetrainOutcome::Skipped);
    }
    let net = base.to_network();
    let version = base.version() + 1;
    if cfg.epochs == 0 {
        let metrics = measure(&net, val)?;
        return Ok(RetrainOutcome::Trained {
            artifact: base.reseal(version, Some(base.digest()), metrics),
            history: Vec::new(),
        });
    }
    let mut data = Vec::with_capacity(used.len() + update.len());
    data.extend_from_slice(used);
    data.extend_from_slice(update);
    let outcome = train(net, &data, val, cfg).map_err(|a| a.error)?;
    let mut metrics = measure(&outcome.network, val)?;
    metrics.val_loss = outcome.best_val_loss;
    Ok(RetrainOutcome::Trained {
        artifact: ModelArtifact::seal(&outcome.network, version, Some(base.digest()), metrics),
        history: outcome.history,
    })
}

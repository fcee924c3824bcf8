//! Model compression: magnitude pruning, k-means codebook quantization and
//! canonical Huffman coding, packed into the `CXRC` container that clients
//! download.
//!
//! Container layout (little-endian):
//!
//! ```text
//! "CXRC" | u16 format version
//! [32] digest of the source artifact
//! [32] digest of the artifact that decompression reproduces
//! model header (as in CXRM: shapes, layer specs, version, lineage, metrics)
//! u32 tensor count, then per tensor:
//!   u32 rank | u32 dims... | u8 mode
//!   mode 0: f32 values, raw
//!   mode 1: u8 bitmap kind (0 dense, 1 gap-coded) [gap stream]
//!           u32 codebook len | f32 codebook... | index stream
//!   mode 2: gap stream | u32 count | f32 survivors...
//! [32] SHA-256 of every preceding byte
//! ```
//!
//! A gap-coded bitmap stores, for each survivor, the number of pruned
//! entries before it as a LEB128 varint, plus a trailing run; the varint
//! bytes are Huffman coded. Both streams use the [`huffman::Encoded`]
//! encoding.

pub mod huffman;
mod prune;
mod quantize;

pub use huffman::{CodeTable, Encoded, HuffmanError};
pub use prune::prune;
pub use quantize::{quantize, Quantized};

use std::path::Path;

use thiserror::Error;

use crate::digest::Digest;
use crate::nn::{read_header, train_masked, Example, LayerSpec, ModelArtifact, Network, NnError, ParamMasks, TrainConfig};
use crate::par::Exec;
use crate::tensor::Tensor;
use crate::wire::{Reader, Truncated, Writer};

pub const COMPRESSED_MAGIC: &[u8; 4] = b"CXRC";
pub const COMPRESSED_FORMAT_VERSION: u16 = 1;
pub const DEFAULT_CONV_SPARSITY: f64 = 0.0;

#[derive(Debug, Error)]
pub enum CompressError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("malformed container: {0}")]
    Format(String),
    #[error("corrupt container: stored digest {expected}, computed {actual}")]
    Corrupt { expected: Digest, actual: Digest },
    #[error(transparent)]
    Huffman(#[from] HuffmanError),
    #[error(transparent)]
    Truncated(#[from] Truncated),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Rank-1 tensors (biases) are always stored raw. `None` bits store the
/// surviving weights of that layer kind raw as well.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionConfig {
    /// Fraction of dense weights zeroed.
    pub sparsity: f64,
    /// Fraction of convolution weights zeroed. Small kernels have little
    /// redundancy and hold a tiny share of the bytes; the default leaves
    /// them dense.
    pub conv_sparsity: f64,
    pub conv_bits: Option<u8>,
    pub dense_bits: Option<u8>,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self { sparsity: 0.9, conv_sparsity: DEFAULT_CONV_SPARSITY, conv_bits: Some(8), dense_bits: Some(5) }
    }
}

impl CompressionConfig {
    /// No pruning, no quantization: only container overhead.
    pub fn passthrough() -> Self {
        Self { sparsity: 0.0, conv_sparsity: 0.0, conv_bits: None, dense_bits: None }
    }

    pub fn validate(&self) -> Result<(), CompressError> {
        for s in [self.sparsity, self.conv_sparsity] {
            if !(0.0..1.0).contains(&s) {
                return Err(CompressError::Config(format!("sparsity must be in [0, 1), got {s}")));
            }
        }
        for bits in [self.conv_bits, self.dense_bits].into_iter().flatten() {
            if !(1..=16).contains(&bits) {
                return Err(CompressError::Config(format!("codebook bits must be in 1..=16, got {bits}")));
            }
        }
        Ok(())
    }
}

/// Per-tensor compression outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub tensor: usize,
    pub shape: Vec<usize>,
    pub original_bytes: usize,
    pub compressed_bytes: usize,
    pub sparsity: f64,
    pub codebook_len: usize,
    /// Mean squared error introduced by pruning plus quantization.
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum Values {
    Raw(Vec<f32>),
    Sparse { bitmap: Encoded, values: Vec<f32> },
    Coded { bitmap: Option<Encoded>, codebook: Vec<f32>, indices: Encoded },
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    shape: Vec<usize>,
    values: Values,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedModel {
    original_digest: Digest,
    reconstructed_digest: Digest,
    header: ModelArtifact,
    blocks: Vec<Block>,
    original_size: usize,
    reports: Vec<LayerReport>,
    bytes: Vec<u8>,
}

impl CompressedModel {
    pub fn original_digest(&self) -> Digest {
        self.original_digest
    }

    /// Digest of the artifact [`decompress_model`] rebuilds.
    pub fn reconstructed_digest(&self) -> Digest {
        self.reconstructed_digest
    }

    /// Trailing digest of the container bytes.
    pub fn digest(&self) -> Digest {
        Digest::from_slice(&self.bytes[self.bytes.len() - 32..]).expect("32 bytes")
    }

    pub fn version(&self) -> u64 {
        self.header.version()
    }

    pub fn original_size(&self) -> usize {
        self.original_size
    }

    pub fn compressed_size(&self) -> usize {
        self.bytes.len()
    }

    pub fn ratio(&self) -> f64 {
        self.original_size as f64 / self.compressed_size() as f64
    }

    /// Empty for containers read back from bytes.
    pub fn reports(&self) -> &[LayerReport] {
        &self.reports
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), CompressError> {
        std::fs::write(path, &self.bytes)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, CompressError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CompressError> {
        if bytes.len() < 32 {
            return Err(CompressError::Format("container shorter than its digest".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 32);
        let expected = Digest::from_slice(tail).expect("32 bytes");
        let actual = Digest::of(body);
        if expected != actual {
            return Err(CompressError::Corrupt { expected, actual });
        }
        let mut r = Reader::new(body);
        let magic = r.array::<4>()?;
        if &magic != COMPRESSED_MAGIC {
            return Err(CompressError::Format(format!("bad magic {magic:?}")));
        }
        let fv = r.u16()?;
        if fv != COMPRESSED_FORMAT_VERSION {
            return Err(CompressError::Format(format!("unsupported format version {fv}")));
        }
        let original_digest = Digest(r.array()?);
        let reconstructed_digest = Digest(r.array()?);
        let (input_shape, layers, version, parent, metrics) = read_header(&mut r)?;
        let count = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            blocks.push(read_block(&mut r)?);
        }
        if r.remaining() != 0 {
            return Err(CompressError::Format(format!("{} trailing bytes", r.remaining())));
        }
        let shapes: Vec<Vec<usize>> = blocks.iter().map(|b| b.shape.clone()).collect();
        let zeros = shapes.into_iter().map(Tensor::zeros).collect();
        let net = Network::with_params(input_shape, layers, zeros)?;
        let header = ModelArtifact::seal(&net, version, parent, metrics);
        Ok(Self {
            original_digest,
            reconstructed_digest,
            header,
            blocks,
            original_size: 0,
            reports: Vec::new(),
            bytes: bytes.to_vec(),
        })
    }
}

fn read_block(r: &mut Reader<'_>) -> Result<Block, CompressError> {
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(CompressError::Format(format!("tensor rank {rank} too large")));
    }
    let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
    let n: usize = shape.iter().product();
    let values = match r.u8()? {
        0 => {
            let raw = r.take(n * 4)?;
            Values::Raw(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        }
        1 => {
            let bitmap = match r.u8()? {
                0 => None,
                1 => Some(Encoded::read(r)?),
                k => return Err(CompressError::Format(format!("unknown bitmap kind {k}"))),
            };
            let len = r.u32()? as usize;
            let codebook = (0..len).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
            let indices = Encoded::read(r)?;
            Values::Coded { bitmap, codebook, indices }
        }
        2 => {
            let bitmap = Encoded::read(r)?;
            let len = r.u32()? as usize;
            if len > n {
                return Err(CompressError::Format("more survivors than entries".into()));
            }
            let raw = r.take(len * 4)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Values::Sparse { bitmap, values }
        }
        m => return Err(CompressError::Format(format!("unknown block mode {m}"))),
    };
    Ok(Block { shape, values })
}

fn write_block(w: &mut Writer, b: &Block) {
    w.u32(b.shape.len() as u32);
    for &d in &b.shape {
        w.u32(d as u32);
    }
    match &b.values {
        Values::Raw(v) => {
            w.u8(0);
            for &x in v {
                w.f32(x);
            }
        }
        Values::Sparse { bitmap, values } => {
            w.u8(2);
            bitmap.write(w);
            w.u32(values.len() as u32);
            for &x in values {
                w.f32(x);
            }
        }
        Values::Coded { bitmap, codebook, indices } => {
            w.u8(1);
            match bitmap {
                None => {
                    w.u8(0);
                }
                Some(e) => {
                    w.u8(1);
                    e.write(w);
                }
            }
            w.u32(codebook.len() as u32);
            for &c in codebook {
                w.f32(c);
            }
            indices.write(w);
        }
    }
}

fn encode_gaps(mask: &[bool]) -> Result<Encoded, HuffmanError> {
    let mut g = Writer::new();
    let mut run = 0u64;
    for &keep in mask {
        if keep {
            g.varint(run);
            run = 0;
        } else {
            run += 1;
        }
    }
    g.varint(run);
    let bytes: Vec<u32> = g.finish().into_iter().map(u32::from).collect();
    huffman::encode(&bytes, 256)
}

fn decode_gaps(e: &Encoded, n: usize) -> Result<Vec<bool>, CompressError> {
    let bytes: Vec<u8> = e.decode()?.into_iter().map(|b| b as u8).collect();
    let mut r = Reader::new(&bytes);
    let mut mask = Vec::with_capacity(n);
    while r.remaining() > 0 {
        let run = r.varint()? as usize;
        if mask.len() + run > n {
            return Err(CompressError::Format("bitmap longer than tensor".into()));
        }
        mask.extend(std::iter::repeat_n(false, run));
        if r.remaining() > 0 {
            if mask.len() == n {
                return Err(CompressError::Format("bitmap longer than tensor".into()));
            }
            mask.push(true);
        }
    }
    if mask.len() != n {
        return Err(CompressError::Format(format!("bitmap covers {} of {n} entries", mask.len())));
    }
    Ok(mask)
}

/// Codebook bits and sparsity for tensor `i` (weights and biases alternate).
fn plan(i: usize, t: &Tensor, parametric: &[&LayerSpec], cfg: &CompressionConfig) -> (Option<u8>, f64) {
    if t.shape().len() <= 1 {
        return (None, 0.0);
    }
    match parametric.get(i / 2) {
        Some(LayerSpec::Conv2d { .. }) => (cfg.conv_bits, cfg.conv_sparsity),
        Some(LayerSpec::Dense { .. }) => (cfg.dense_bits, cfg.sparsity),
        _ => (None, 0.0),
    }
}

fn compress_tensor(t: &Tensor, bits: Option<u8>, sparsity: f64) -> Result<(Block, Vec<f64>, usize, usize), CompressError> {
    let shape = t.shape().to_vec();
    let raw = |data: &[f64]| -> Vec<f32> { data.iter().map(|&x| x as f32).collect() };
    if shape.len() <= 1 {
        let v = raw(t.data());
        let recon = v.iter().map(|&x| x as f64).collect();
        return Ok((Block { shape, values: Values::Raw(v) }, recon, 0, 0));
    }
    let (pruned, mask) = prune(t, sparsity);
    let pruned_count = mask.iter().filter(|&&m| !m).count();
    let bitmap = if pruned_count == 0 { None } else { Some(encode_gaps(&mask)?) };
    let survivors: Vec<f64> = pruned.data().iter().zip(&mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();

    let (values, recon_survivors, codebook_len) = match bits {
        None => {
            let v = raw(&survivors);
            let recon: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            let values = match bitmap {
                None => Values::Raw(v),
                Some(bitmap) => Values::Sparse { bitmap, values: v },
            };
            (values, recon, 0)
        }
        Some(bits) => {
            let q = quantize(&survivors, bits);
            let indices = huffman::encode(&q.indices, q.codebook.len())?;
            let recon = q.reconstruct();
            let len = q.codebook.len();
            (Values::Coded { bitmap, codebook: q.codebook, indices }, recon, len)
        }
    };
    let mut it = recon_survivors.into_iter();
    let recon = mask.iter().map(|&keep| if keep { it.next().unwrap() } else { 0.0 }).collect();
    Ok((Block { shape, values }, recon, pruned_count, codebook_len))
}

/// Compress a sealed artifact.
pub fn compress_model(artifact: &ModelArtifact, cfg: &CompressionConfig) -> Result<CompressedModel, CompressError> {
    compress_model_with(artifact, cfg, Exec::default(), |net, _| Ok(net))
}

/// Hook that retrains the pruned network with its pruning masks held fixed.
pub fn masked_fine_tune<'a>(
    train_set: &'a [Example],
    val_set: &'a [Example],
    train_cfg: &'a TrainConfig,
) -> impl FnOnce(Network, &ParamMasks) -> Result<Network, NnError> + 'a {
    move |net, masks| {
        train_masked(net, masks, train_set, val_set, train_cfg, Exec::default())
            .map(|o| o.network)
            .map_err(|a| a.error)
    }
}

/// Compress with a hook that may fine-tune the pruned network before
/// quantization. The hook receives the keep masks; pruned positions are
/// forced back to zero afterwards whatever it returns.
pub fn compress_model_with<H>(
    artifact: &ModelArtifact,
    cfg: &CompressionConfig,
    exec: Exec,
    fine_tune: H,
) -> Result<CompressedModel, CompressError>
where
    H: FnOnce(Network, &ParamMasks) -> Result<Network, NnError>,
{
    cfg.validate()?;
    // tensor i belongs to the i/2-th parametric layer (weight, bias pairs)
    let parametric: Vec<&LayerSpec> = artifact.layers().iter().filter(|l| l.is_parametric()).collect();
    let plans: Vec<(Option<u8>, f64)> =
        artifact.params().iter().enumerate().map(|(i, t)| plan(i, t, &parametric, cfg)).collect();

    let mut params = artifact.params().to_vec();
    if plans.iter().any(|&(_, s)| s > 0.0) {
        let (pruned, masks): (Vec<Tensor>, Vec<Option<Vec<bool>>>) = params
            .iter()
            .zip(&plans)
            .map(|(t, &(_, s))| if s > 0.0 { let (p, m) = prune(t, s); (p, Some(m)) } else { (t.clone(), None) })
            .unzip();
        let net = Network::with_params(artifact.input_shape().to_vec(), artifact.layers().to_vec(), pruned)?;
        let mut tuned = fine_tune(net, &masks)?.into_params();
        for (t, m) in tuned.iter_mut().zip(&masks) {
            if let Some(m) = m {
                for (v, &keep) in t.data_mut().iter_mut().zip(m) {
                    if !keep {
                        *v = 0.0;
                    }
                }
            }
        }
        params = tuned;
    }

    let idx: Vec<usize> = (0..params.len()).collect();
    let results = exec.map(&idx, |&i| compress_tensor(&params[i], plans[i].0, plans[i].1));
    let mut blocks = Vec::with_capacity(params.len());
    let mut recon_params = Vec::with_capacity(params.len());
    let mut reports = Vec::with_capacity(params.len());
    for (i, res) in results.into_iter().enumerate() {
        let (block, recon, pruned, codebook_len) = res?;
        let orig = &artifact.params()[i];
        let mse = orig.data().iter().zip(&recon).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / orig.len().max(1) as f64;
        let mut w = Writer::new();
        write_block(&mut w, &block);
        reports.push(LayerReport {
            tensor: i,
            shape: block.shape.clone(),
            original_bytes: orig.len() * 4,
            compressed_bytes: w.len(),
            sparsity: pruned as f64 / orig.len().max(1) as f64,
            codebook_len,
            mse,
        });
        recon_params.push(Tensor::new(block.shape.clone(), recon).map_err(NnError::from)?);
        blocks.push(block);
    }
    let net = Network::with_params(artifact.input_shape().to_vec(), artifact.layers().to_vec(), recon_params)?;
    let rebuilt = ModelArtifact::seal(&net, artifact.version(), artifact.parent(), artifact.metrics());

    let mut w = Writer::new();
    w.bytes(COMPRESSED_MAGIC).u16(COMPRESSED_FORMAT_VERSION);
    w.bytes(artifact.digest().as_bytes()).bytes(rebuilt.digest().as_bytes());
    artifact.header_bytes(&mut w);
    w.u32(blocks.len() as u32);
    for b in &blocks {
        write_block(&mut w, b);
    }
    let mut bytes = w.finish();
    let d = Digest::of(&bytes);
    bytes.extend_from_slice(d.as_bytes());

    Ok(CompressedModel {
        original_digest: artifact.digest(),
        reconstructed_digest: rebuilt.digest(),
        header: rebuilt,
        blocks,
        original_size: artifact.byte_len(),
        reports,
        bytes,
    })
}

/// Rebuild the artifact and check it against the digest recorded at
/// compression time.
pub fn decompress_model(cm: &CompressedModel) -> Result<ModelArtifact, CompressError> {
    let mut params = Vec::with_capacity(cm.blocks.len());
    for b in &cm.blocks {
        let n: usize = b.shape.iter().product();
        let data: Vec<f64> = match &b.values {
            Values::Raw(v) => {
                if v.len() != n {
                    return Err(CompressError::Format("raw block length mismatch".into()));
                }
                v.iter().map(|&x| x as f64).collect()
            }
            Values::Sparse { bitmap, values } => {
                let mask = decode_gaps(bitmap, n)?;
                if mask.iter().filter(|&&m| m).count() != values.len() {
                    return Err(CompressError::Format("survivor count mismatch".into()));
                }
                let mut it = values.iter();
                mask.iter().map(|&m| if m { *it.next().unwrap() as f64 } else { 0.0 }).collect()
            }
            Values::Coded { bitmap, codebook, indices } => {
                let mask = match bitmap {
                    Some(e) => decode_gaps(e, n)?,
                    None => vec![true; n],
                };
                let survivors = mask.iter().filter(|&&m| m).count();
                let idx = indices.decode()?;
                if idx.len() != survivors {
                    return Err(CompressError::Format(format!("{} indices for {survivors} survivors", idx.len())));
                }
                let mut it = idx.into_iter();
                let mut out = Vec::with_capacity(n);
                for keep in mask {
                    if keep {
                        let i = it.next().unwrap() as usize;
                        let c = *codebook.get(i).ok_or_else(|| CompressError::Format(format!("index {i} past codebook")))?;
                        out.push(c as f64);
                    } else {
                        out.push(0.0);
                    }
                }
                out
            }
        };
        params.push(Tensor::new(b.shape.clone(), data).map_err(NnError::from)?);
    }
    let h = &cm.header;
    let net = Network::with_params(h.input_shape().to_vec(), h.layers().to_vec(), params)?;
    let art = ModelArtifact::seal(&net, h.version(), h.parent(), h.metrics());
    if art.digest() != cm.reconstructed_digest {
        return Err(CompressError::Corrupt { expected: cm.reconstructed_digest, actual: art.digest() });
    }
    Ok(art)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ValMetrics;

    fn small_net(seed: u64) -> Network {
        Network::new(
            vec![12, 12, 1],
            vec![
                LayerSpec::Conv2d { filters: 4, kernel: 3, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 8 },
                LayerSpec::Relu,
                LayerSpec::Dense { units: 2 },
                LayerSpec::Softmax,
            ],
            seed,
        )
        .unwrap()
    }

    fn artifact() -> ModelArtifact {
        ModelArtifact::seal(&small_net(4), 3, None, ValMetrics { val_loss: 0.2, accuracy: 0.9, precision: 0.8, recall: 0.95 })
    }

    #[test]
    fn round_trip_through_bytes() {
        let art = artifact();
        let cm = compress_model(&art, &CompressionConfig::default()).unwrap();
        let back = CompressedModel::from_bytes(cm.as_bytes()).unwrap();
        let a = decompress_model(&cm).unwrap();
        let b = decompress_model(&back).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), cm.reconstructed_digest());
        assert_eq!(back.original_digest(), art.digest());
        assert_eq!(a.version(), 3);
        assert_eq!(a.metrics(), art.metrics());
    }

    #[test]
    fn decompressed_weights_equal_pruned_quantized() {
        let art = artifact();
        let cfg = CompressionConfig::default();
        let cm = compress_model(&art, &cfg).unwrap();
        let out = decompress_model(&cm).unwrap();
        let parametric: Vec<_> = art.layers().iter().filter(|l| l.is_parametric()).collect();
        for (i, (orig, got)) in art.params().iter().zip(out.params()).enumerate() {
            if orig.shape().len() == 1 {
                assert_eq!(orig, got);
                continue;
            }
            let (bits, sparsity) = plan(i, orig, &parametric, &cfg);
            let (pruned, mask) = prune(orig, sparsity);
            let bits = bits.unwrap();
            let survivors: Vec<f64> = pruned.data().iter().zip(&mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
            let q = quantize(&survivors, bits).reconstruct();
            let mut it = q.iter();
            let expect: Vec<f64> = mask.iter().map(|&m| if m { *it.next().unwrap() } else { 0.0 }).collect();
            assert_eq!(got.data(), &expect[..]);
        }
    }

    #[test]
    fn passthrough_is_near_unit_ratio() {
        let art = artifact();
        let cm = compress_model(&art, &CompressionConfig::passthrough()).unwrap();
        assert!(cm.ratio() > 0.95 && cm.ratio() <= 1.05, "{}", cm.ratio());
        assert_eq!(decompress_model(&cm).unwrap().params(), art.params());
        assert_eq!(cm.reconstructed_digest(), art.digest());
    }

    #[test]
    fn recompression_is_a_fixed_point_in_size() {
        let art = artifact();
        let cfg = CompressionConfig::default();
        let once = compress_model(&art, &cfg).unwrap();
        let twice = compress_model(&decompress_model(&once).unwrap(), &cfg).unwrap();
        assert_eq!(once.compressed_size(), twice.compressed_size());
    }

    #[test]
    fn deterministic_digest() {
        let art = artifact();
        let a = compress_model_with(&art, &CompressionConfig::default(), Exec::Sequential, |n, _| Ok(n)).unwrap();
        let b = compress_model_with(&art, &CompressionConfig::default(), Exec::Parallel, |n, _| Ok(n)).unwrap();
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn tampering_is_detected() {
        let cm = compress_model(&artifact(), &CompressionConfig::default()).unwrap();
        let mut bytes = cm.as_bytes().to_vec();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(CompressedModel::from_bytes(&bytes), Err(CompressError::Corrupt { .. })));
    }

    #[test]
    fn fine_tune_hook_keeps_pruned_zeros() {
        let art = artifact();
        let cfg = CompressionConfig { sparsity: 0.5, conv_sparsity: 0.5, ..CompressionConfig::default() };
        let cm = compress_model_with(&art, &cfg, Exec::Sequential, |mut net, _| {
            for t in net.params_mut() {
                for v in t.data_mut() {
                    *v += 0.01;
                }
            }
            Ok(net)
        })
        .unwrap();
        let out = decompress_model(&cm).unwrap();
        let zeros = out.params()[0].data().iter().filter(|&&v| v == 0.0).count();
        assert!(zeros >= out.params()[0].len() / 2);
    }

    #[test]
    fn gap_bitmap_round_trip() {
        let mask: Vec<bool> = (0..1000).map(|i| i % 7 == 0 || i % 300 == 5).collect();
        let e = encode_gaps(&mask).unwrap();
        assert_eq!(decode_gaps(&e, 1000).unwrap(), mask);
        let all_pruned = vec![false; 50];
        assert_eq!(decode_gaps(&encode_gaps(&all_pruned).unwrap(), 50).unwrap(), all_pruned);
    }

    #[test]
    fn config_validation() {
        assert!(CompressionConfig { sparsity: 1.0, ..Default::default() }.validate().is_err());
        assert!(CompressionConfig { conv_sparsity: -0.1, ..Default::default() }.validate().is_err());
        assert!(CompressionConfig { conv_bits: Some(0), ..Default::default() }.validate().is_err());
        assert!(CompressionConfig { dense_bits: Some(17), ..Default::default() }.validate().is_err());
    }
}

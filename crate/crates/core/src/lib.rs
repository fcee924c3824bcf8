//! Core of the chest X-ray screening relay: image preprocessing, dataset
//! bookkeeping, a small CNN engine, classification metrics, occlusion
//! saliency and the prune/quantize/Huffman model compressor.
//!
//! Data-parallel loops run on rayon when the `parallel` feature is enabled
//! (the default) and sequentially otherwise; see [`par::Exec`].

pub mod compress;
pub mod dataset;
pub mod digest;
pub mod imaging;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod saliency;
pub mod synthetic;
pub mod tensor;
pub mod wire;

pub use digest::Digest;
pub use imaging::GrayImage;
pub use tensor::Tensor;

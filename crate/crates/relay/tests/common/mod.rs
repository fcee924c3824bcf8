#![allow(dead_code)]

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use cxr_core::compress::CompressionConfig;
use cxr_core::dataset::{Sample, SCAN_SIDE};
use cxr_core::metrics::Class;
use cxr_core::nn::{measure, train, Example, LayerSpec, ModelArtifact, Network, TrainConfig};
use cxr_core::synthetic::{disc_dataset, disc_scan};
use cxr_core::GrayImage;
use cxr_relay::client::{Client, ClientConfig};
use cxr_relay::link::{Endpoint, Link, LinkError};
use cxr_relay::netsim::{LinkProfile, Outage, SharedNet, SimNet};
use cxr_relay::server::{Server, ServerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Pool, flatten and a 2-way dense head: a few hundred parameters.
pub fn tiny_network(seed: u64) -> Network {
    use LayerSpec::*;
    Network::new(vec![SCAN_SIDE, SCAN_SIDE, 1], vec![MaxPool2d { size: 8 }, Flatten, Dense { units: 2 }, Softmax], seed).unwrap()
}

/// Dense head over every pixel: large enough to span many chunks.
pub fn wide_network(seed: u64) -> Network {
    use LayerSpec::*;
    Network::new(vec![SCAN_SIDE, SCAN_SIDE, 1], vec![Flatten, Dense { units: 2 }, Softmax], seed).unwrap()
}

pub fn examples(samples: &[Sample]) -> Vec<Example> {
    samples.iter().map(Sample::to_example).collect()
}

pub fn seal(net: &Network, version: u64) -> ModelArtifact {
    let m = measure(net, &examples(&disc_dataset(20, 999))).unwrap();
    ModelArtifact::seal(net, version, None, m)
}

pub fn trained_tiny(seed: u64, version: u64) -> ModelArtifact {
    let tr = examples(&disc_dataset(60, seed + 1000));
    let va = examples(&disc_dataset(20, seed + 2000));
    let cfg = TrainConfig { epochs: 10, patience: 10, batch_size: 16, learning_rate: 0.01, seed, ..TrainConfig::default() };
    let out = train(tiny_network(seed), &tr, &va, &cfg).unwrap();
    seal(&out.network, version)
}

pub fn server_config(root: &Path) -> ServerConfig {
    let mut cfg = ServerConfig::new(root);
    cfg.compression = CompressionConfig::passthrough();
    cfg.fine_tune = None;
    cfg
}

pub fn open_server(root: &Path, held_out: Option<Vec<Sample>>) -> Arc<Server> {
    Arc::new(Server::open(server_config(root), held_out).unwrap())
}

pub fn scan_image(class: Class, seed: u64) -> GrayImage {
    disc_scan(class, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn profile(outages: &[(f64, f64)]) -> LinkProfile {
    LinkProfile {
        outages: outages.iter().map(|&(start, end)| Outage { start, end }).collect(),
        ..LinkProfile::dialup()
    }
}

pub fn sim_client(net: &SharedNet, server: &Arc<Server>, dir: &Path) -> Client {
    let mut cfg = ClientConfig::new(dir, "site");
    cfg.link = Some(net.lock().profile().clone());
    let ep: Arc<dyn Endpoint> = server.clone();
    Client::open(cfg, Box::new(net.link(ep.clone())), Box::new(net.link(ep)), Arc::new(net.clock())).unwrap()
}

pub fn sim_net(outages: &[(f64, f64)]) -> SharedNet {
    SimNet::shared(profile(outages)).unwrap()
}

/// Delivers every request to the server but loses the first `drop`
/// replies, as a line that fails after the server acted.
pub struct LossyLink {
    pub server: Arc<Server>,
    pub drop: Arc<AtomicUsize>,
}

impl Link for LossyLink {
    fn exchange(&mut self, frame: &[u8], _timeout: Duration) -> Result<Vec<u8>, LinkError> {
        let reply = self.server.handle_frame(frame);
        if self.drop.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1)).is_ok() {
            return Err(LinkError::Timeout { sent: frame.len() as u64, received: 0 });
        }
        Ok(reply)
    }
}

/// Refuses every exchange.
pub struct DeadLink;

impl Link for DeadLink {
    fn exchange(&mut self, _frame: &[u8], _timeout: Duration) -> Result<Vec<u8>, LinkError> {
        Err(LinkError::Offline)
    }
}

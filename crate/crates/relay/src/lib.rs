//! Edge/central relay for chest X-ray screening: the framed wire protocol,
//! a deterministic low-bandwidth link simulator, the central server with its
//! model registry, and the edge client with its offline cache and local API.

pub mod client;
pub mod link;
pub mod netsim;
pub mod protocol;
pub mod scenario;
pub mod server;

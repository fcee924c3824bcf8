//! Localhost HTTP/JSON surface consumed by the browser UI.
//!
//! | method | path                      | body / reply                              |
//! |--------|---------------------------|-------------------------------------------|
//! | POST   | `/api/scan`               | PGM bytes → scan result                   |
//! | POST   | `/api/confirm`            | `{"scan_id", "confirmed"}` → ack          |
//! | GET    | `/api/status`             | connectivity, cache, model, ledger        |
//! | GET    | `/api/scans`              | every evaluated scan                      |
//! | GET    | `/api/scans/<id>`         | one scan, with any later server re-score  |
//! | GET    | `/api/scans/<id>/heatmap` | occlusion overlay as PGM (local model)    |
//!
//! Anything else under `GET /` is served from the UI directory if one is
//! configured. Errors are `{"error": "..."}` with a 4xx/5xx status.

use std::io::Read;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use cxr_core::imaging::GrayImage;
use cxr_core::metrics::Class;
use cxr_core::saliency::{occlusion_heatmap, DEFAULT_PATCH, DEFAULT_STRIDE};
use serde::Deserialize;
use serde_json::json;
use tiny_http::{Header, Method, Request, Response, Server};

use super::{Client, ClientError};

const MAX_UPLOAD: usize = 64 << 20;
const WORKERS: usize = 2;

pub struct ApiHandle {
    server: Arc<Server>,
    addr: SocketAddr,
    workers: Vec<JoinHandle<()>>,
}

impl ApiHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    /// Block until the server is shut down from elsewhere.
    pub fn wait(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    fn stop_now(&mut self) {
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for ApiHandle {
    fn drop(&mut self) {
        self.stop_now();
    }
}

#[derive(Deserialize)]
struct ConfirmBody {
    scan_id: String,
    confirmed: bool,
}

type Reply = Response<std::io::Cursor<Vec<u8>>>;

fn header(k: &str, v: &str) -> Header {
    Header::from_bytes(k.as_bytes(), v.as_bytes()).expect("static header")
}

fn json_reply(status: u16, body: serde_json::Value) -> Reply {
    Response::from_data(body.to_string().into_bytes())
        .with_status_code(status)
        .with_header(header("Content-Type", "application/json"))
        .with_header(header("Cache-Control", "no-store"))
}

fn error(status: u16, msg: impl std::fmt::Display) -> Reply {
    json_reply(status, json!({ "error": msg.to_string() }))
}

fn client_error(e: ClientError) -> Reply {
    let status = match &e {
        ClientError::Input(_) => 400,
        ClientError::NotFound(_) => 404,
        ClientError::Server { code, .. } if *code == crate::protocol::ErrorCode::NotFound as u16 => 404,
        ClientError::Unavailable => 503,
        _ => 500,
    };
    error(status, e)
}

pub fn serve_api(client: Arc<Client>, addr: &str, ui_dir: Option<PathBuf>) -> std::io::Result<ApiHandle> {
    let server = Arc::new(Server::http(addr).map_err(|e| std::io::Error::other(e.to_string()))?);
    let addr = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| std::io::Error::other("API must listen on an IP address"))?;
    let mut workers = Vec::new();
    for i in 0..WORKERS {
        let (server, client, ui) = (server.clone(), client.clone(), ui_dir.clone());
        workers.push(thread::Builder::new().name(format!("cxr-http-{i}")).spawn(move || {
            while let Ok(mut req) = server.recv() {
                let reply = route(&client, ui.as_deref(), &mut req);
                let _ = req.respond(reply);
            }
        })?);
    }
    Ok(ApiHandle { server, addr, workers })
}

fn read_body(req: &mut Request) -> Result<Vec<u8>, Reply> {
    let mut body = Vec::new();
    req.as_reader()
        .take(MAX_UPLOAD as u64 + 1)
        .read_to_end(&mut body)
        .map_err(|e| error(400, e))?;
    if body.len() > MAX_UPLOAD {
        return Err(error(413, "upload too large"));
    }
    Ok(body)
}

fn route(client: &Client, ui: Option<&Path>, req: &mut Request) -> Reply {
    let url = req.url().split('?').next().unwrap_or("").to_string();
    let parts: Vec<&str> = url.trim_matches('/').split('/').collect();
    match (req.method(), parts.as_slice()) {
        (Method::Post, ["api", "scan"]) => {
            let body = match read_body(req) {
                Ok(b) => b,
                Err(r) => return r,
            };
            let img = match GrayImage::from_pgm(&body) {
                Ok(i) => i,
                Err(e) => return error(400, format!("unreadable image: {e}")),
            };
            match client.handle_scan(&img) {
                Ok(r) => json_reply(200, serde_json::to_value(r).expect("serializable")),
                Err(e) => client_error(e),
            }
        }
        (Method::Post, ["api", "confirm"]) => {
            let body = match read_body(req) {
                Ok(b) => b,
                Err(r) => return r,
            };
            let b: ConfirmBody = match serde_json::from_slice(&body) {
                Ok(b) => b,
                Err(e) => return error(400, format!("bad confirm body: {e}")),
            };
            match client.record_confirmation(&b.scan_id, b.confirmed) {
                Ok(a) => json_reply(200, serde_json::to_value(a).expect("serializable")),
                Err(e) => client_error(e),
            }
        }
        (Method::Get, ["api", "status"]) => json_reply(200, serde_json::to_value(client.status()).expect("serializable")),
        (Method::Get, ["api", "scans"]) => json_reply(200, serde_json::to_value(client.scans()).expect("serializable")),
        (Method::Get, ["api", "scans", id]) => match client.scan(id) {
            Some(e) => {
                let mut v = serde_json::to_value(&e).expect("serializable");
                v["disagreement"] = json!(e.disagreement());
                json_reply(200, v)
            }
            None => error(404, format!("unknown scan id {id}")),
        },
        (Method::Get, ["api", "scans", id, "heatmap"]) => heatmap(client, id),
        (Method::Get, _) if !url.starts_with("/api") => static_file(ui, &url),
        _ => error(404, format!("no route for {} {url}", req.method())),
    }
}

fn heatmap(client: &Client, id: &str) -> Reply {
    let Some(entry) = client.scan(id) else { return error(404, format!("unknown scan id {id}")) };
    let img = match client.scan_image(id) {
        Ok(i) => i,
        Err(e) => return client_error(e),
    };
    let Some(model) = client.model() else { return error(503, "no local model for heatmaps") };
    let target: Class = entry.verdict;
    let map = match occlusion_heatmap(&model.network, &img, target, DEFAULT_PATCH, DEFAULT_STRIDE) {
        Ok(m) => m,
        Err(e) => return error(500, e),
    };
    match map.overlay(&img) {
        Ok(o) => Response::from_data(o.to_pgm()).with_header(header("Content-Type", "image/x-portable-graymap")),
        Err(e) => error(500, e),
    }
}

fn static_file(ui: Option<&Path>, url: &str) -> Reply {
    let Some(root) = ui else { return error(404, "no UI directory configured") };
    let rel = url.trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let rel = Path::new(rel);
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return error(400, "bad path");
    }
    let path = root.join(rel);
    let Ok(bytes) = std::fs::read(&path) else { return error(404, format!("not found: {url}")) };
    let mime = match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    };
    Response::from_data(bytes).with_header(header("Content-Type", mime))
}

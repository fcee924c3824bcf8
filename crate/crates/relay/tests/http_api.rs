mod common;

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::Arc;

use common::*;
use cxr_core::metrics::Class;
use cxr_core::GrayImage;
use cxr_relay::client::serve_api;
use serde_json::Value;

fn call(addr: SocketAddr, method: &str, path: &str, body: &[u8]) -> (u16, Vec<u8>) {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(s, "{method} {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\nContent-Length: {}\r\n\r\n", body.len()).unwrap();
    s.write_all(body).unwrap();
    let mut raw = Vec::new();
    s.read_to_end(&mut raw).unwrap();
    let split = raw.windows(4).position(|w| w == b"\r\n\r\n").expect("header end");
    let head = String::from_utf8_lossy(&raw[..split]).into_owned();
    let status = head.split_whitespace().nth(1).unwrap().parse().unwrap();
    (status, raw[split + 4..].to_vec())
}

fn json(addr: SocketAddr, method: &str, path: &str, body: &[u8]) -> (u16, Value) {
    let (status, body) = call(addr, method, path, body);
    (status, serde_json::from_slice(&body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&body))))
}

#[test]
fn scan_confirm_status_and_heatmap_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let net = sim_net(&[(100.0, f64::INFINITY)]);
    let server = open_server(&dir.path().join("server"), None);
    server.publish(&trained_tiny(1, 1)).unwrap();
    let client = Arc::new(sim_client(&net, &server, &dir.path().join("client")));
    client.sync_cycle().unwrap();
    let ui = dir.path().join("ui");
    std::fs::create_dir_all(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<!doctype html><title>cxr</title>").unwrap();
    let api = serve_api(client.clone(), "127.0.0.1:0", Some(ui)).unwrap();
    let addr = api.addr();

    let pgm = scan_image(Class::Pneumonia, 5).to_pgm();
    let (st, scan) = json(addr, "POST", "/api/scan", &pgm);
    assert_eq!(st, 200, "{scan}");
    assert_eq!(scan["source"], "server");
    assert_eq!(scan["model_version"], 1);
    let p = scan["probability"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
    assert!(scan["verdict"].is_string());
    assert!(scan["recall"].is_number() && scan["precision"].is_number());
    let id = scan["scan_id"].as_str().unwrap().to_string();

    let (st, ack) = json(addr, "POST", "/api/confirm", format!(r#"{{"scan_id":"{id}","confirmed":true}}"#).as_bytes());
    assert_eq!(st, 200, "{ack}");
    assert_eq!(ack["delivered"], true);
    assert_eq!(server.store().update_batch().len(), 1);

    // the line goes down: the next scan is answered locally and queued
    net.lock().advance_to(200.0);
    let (st, local) = json(addr, "POST", "/api/scan", &scan_image(Class::Normal, 6).to_pgm());
    assert_eq!(st, 200);
    assert_eq!(local["source"], "local");
    assert!(local["fallback_reason"].is_string());
    let local_id = local["scan_id"].as_str().unwrap().to_string();
    let (_, ack) = json(addr, "POST", "/api/confirm", format!(r#"{{"scan_id":"{local_id}","confirmed":false}}"#).as_bytes());
    assert_eq!(ack["delivered"], false);

    let (st, status) = json(addr, "GET", "/api/status", b"");
    assert_eq!(st, 200);
    assert_eq!(status["connected"], false);
    assert_eq!(status["cache_depth"], 2);
    assert_eq!(status["pending_scans"], 1);
    assert_eq!(status["pending_confirms"], 1);
    assert_eq!(status["model"]["version"], 1);
    assert_eq!(status["model"]["digest"], server.active().unwrap().compressed_digest().to_hex());
    assert!(status["ledger"]["bytes_up"].as_u64().unwrap() > 17_000);

    let (_, all) = json(addr, "GET", "/api/scans", b"");
    assert_eq!(all.as_array().unwrap().len(), 2);
    let (st, one) = json(addr, "GET", &format!("/api/scans/{id}"), b"");
    assert_eq!(st, 200);
    assert_eq!(one["confirmed"], true);
    assert_eq!(one["disagreement"], false);

    let (st, heat) = call(addr, "GET", &format!("/api/scans/{id}/heatmap"), b"");
    assert_eq!(st, 200);
    let overlay = GrayImage::from_pgm(&heat).unwrap();
    assert_eq!((overlay.width(), overlay.height()), (128, 128));

    let (st, page) = call(addr, "GET", "/", b"");
    assert_eq!(st, 200);
    assert!(String::from_utf8_lossy(&page).contains("<title>cxr</title>"));
    api.shutdown();
}

#[test]
fn errors_map_to_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let net = sim_net(&[(0.0, f64::INFINITY)]);
    let server = open_server(&dir.path().join("server"), None);
    let client = Arc::new(sim_client(&net, &server, &dir.path().join("client")));
    let api = serve_api(client, "127.0.0.1:0", None).unwrap();
    let addr = api.addr();

    assert_eq!(json(addr, "POST", "/api/scan", b"not an image").0, 400);
    // offline with no model yet
    let (st, body) = json(addr, "POST", "/api/scan", &scan_image(Class::Normal, 1).to_pgm());
    assert_eq!(st, 503, "{body}");
    assert!(body["error"].is_string());
    assert_eq!(json(addr, "POST", "/api/confirm", br#"{"scan_id":"site-000404","confirmed":true}"#).0, 404);
    assert_eq!(json(addr, "POST", "/api/confirm", b"{}").0, 400);
    assert_eq!(json(addr, "GET", "/api/scans/site-000404", b"").0, 404);
    assert_eq!(json(addr, "GET", "/api/scans/site-000404/heatmap", b"").0, 404);
    assert_eq!(json(addr, "DELETE", "/api/status", b"").0, 404);
    assert_eq!(json(addr, "GET", "/index.html", b"").0, 404, "no UI configured");
    let (st, status) = json(addr, "GET", "/api/status", b"");
    assert_eq!(st, 200);
    assert!(status["model"].is_null());
}

#[test]
fn static_files_stay_inside_the_ui_directory() {
    let dir = tempfile::tempdir().unwrap();
    let net = sim_net(&[]);
    let server = open_server(&dir.path().join("server"), None);
    let client = Arc::new(sim_client(&net, &server, &dir.path().join("client")));
    let ui = dir.path().join("ui");
    std::fs::create_dir_all(ui.join("js")).unwrap();
    std::fs::write(ui.join("js/app.js"), "console.log(1)").unwrap();
    std::fs::write(dir.path().join("secret.txt"), "s3cret").unwrap();
    let api = serve_api(client, "127.0.0.1:0", Some(ui)).unwrap();
    let addr = api.addr();
    let (st, js) = call(addr, "GET", "/js/app.js", b"");
    assert_eq!((st, js.as_slice()), (200, b"console.log(1)".as_slice()));
    let (st, body) = call(addr, "GET", "/../secret.txt", b"");
    assert_ne!(st, 200);
    assert!(!String::from_utf8_lossy(&body).contains("s3cret"));
    let (st, body) = call(addr, "GET", "/js/%2e%2e/%2e%2e/secret.txt", b"");
    assert_ne!(st, 200);
    assert!(!String::from_utf8_lossy(&body).contains("s3cret"));
}

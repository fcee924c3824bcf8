//! `serve`, `client` and `registry`: the long-running services and the
//! registry operator commands.

use std::io::Write;
use std::net::TcpListener;
use std::sync::Arc;
use std::time::Duration;

use cxr_core::compress::CompressionConfig;
use cxr_core::dataset::{load_labeled_dir, SCAN_SIDE};
use cxr_relay::client::{serve_api, spawn_daemon, Client, ClientConfig};
use cxr_relay::link::{Endpoint, SystemClock, TcpLink};
use cxr_relay::server::{serve_tcp, PublishReport, RetrainReport, Server, ServerConfig};
use serde_json::json;

use crate::args::{ClientArgs, RegistryAction, RegistryArgs, ServeArgs};
use crate::model::load_model;
use crate::{emit_json, input, Cli, CliError, Result};

fn open_server(root: &std::path::Path, passthrough: bool, threshold: usize, held_out: Option<&std::path::Path>) -> Result<Server> {
    let mut cfg = ServerConfig::new(root);
    if passthrough {
        cfg.compression = CompressionConfig::passthrough();
        cfg.fine_tune = None;
    }
    cfg.policy.threshold = threshold;
    let held = match held_out {
        Some(d) => Some(load_labeled_dir(input(d)?, SCAN_SIDE).map_err(CliError::failed)?),
        None => None,
    };
    Server::open(cfg, held).map_err(CliError::failed)
}

fn publish_line(r: &PublishReport) -> String {
    format!(
        "active v{} model={} compressed={} ({} -> {} bytes)",
        r.version,
        &r.model_digest[..12],
        &r.compressed_digest[..12],
        r.original_bytes,
        r.compressed_bytes
    )
}

pub(crate) fn serve(cli: &Cli, a: &ServeArgs, out: &mut dyn Write) -> Result<()> {
    if a.retrain_every == 0 {
        return Err(CliError::Usage("--retrain-every must be >= 1".into()));
    }
    let server = Arc::new(open_server(&a.root, a.passthrough, a.retrain_threshold, a.held_out.as_deref())?);
    if let Some(p) = &a.publish {
        let r = server.publish(&load_model(p)?.artifact).map_err(CliError::failed)?;
        writeln!(out, "{}", publish_line(&r))?;
    }
    let listener = TcpListener::bind(&a.addr).map_err(|e| CliError::Failed(format!("bind {}: {e}", a.addr)))?;
    let ep: Arc<dyn Endpoint> = server.clone();
    let handle = serve_tcp(ep, listener)?;
    if cli.json {
        emit_json(out, &json!({"listening": handle.addr().to_string()}))?;
    } else {
        writeln!(out, "listening on {}", handle.addr())?;
    }
    out.flush()?;

    let every = Duration::from_secs(a.retrain_every);
    let bg = server.clone();
    std::thread::Builder::new().name("cxr-retrain".into()).spawn(move || loop {
        std::thread::sleep(every);
        match bg.retrain_and_maybe_replace() {
            Ok(RetrainReport::BelowThreshold { .. }) => {}
            Ok(r) => log::info!("retrain: {r:?}"),
            Err(e) => log::warn!("retrain failed: {e}"),
        }
    })?;
    handle.wait();
    Ok(())
}

/// Config file (if any) with command-line overrides applied.
pub fn client_config(a: &ClientArgs) -> Result<ClientConfig> {
    let mut cfg = match &a.config {
        Some(p) => ClientConfig::load(input(p)?).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        None => ClientConfig::new("client-data", "edge"),
    };
    if let Some(d) = &a.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(s) = &a.server {
        cfg.server = Some(s.clone());
    }
    if let Some(h) = &a.http {
        cfg.http = h.clone();
    }
    if let Some(id) = &a.client_id {
        cfg.client_id = id.clone();
    }
    if let Some(u) = &a.ui_dir {
        cfg.ui_dir = Some(u.clone());
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

pub(crate) fn client(cli: &Cli, a: &ClientArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = client_config(a)?;
    let Some(server) = cfg.server.clone() else {
        return Err(CliError::Usage("no server address: set `server` in the config file or pass --server".into()));
    };
    if cfg.link.is_some() {
        log::warn!("bandwidth_kbps and latency_ms only apply to simulated links; ignored");
    }
    let http = cfg.http.clone();
    let ui = cfg.ui_dir.clone();
    let client = Arc::new(
        Client::open(cfg, Box::new(TcpLink::new(server.clone())), Box::new(TcpLink::new(server)), Arc::new(SystemClock))
            .map_err(CliError::failed)?,
    );
    let api = serve_api(client.clone(), &http, ui).map_err(|e| CliError::Failed(format!("bind {http}: {e}")))?;
    let _daemon = spawn_daemon(client, Duration::from_millis(250))?;
    if cli.json {
        emit_json(out, &json!({"api": format!("http://{}", api.addr())}))?;
    } else {
        writeln!(out, "api on http://{}", api.addr())?;
    }
    out.flush()?;
    api.wait();
    Ok(())
}

pub(crate) fn registry(cli: &Cli, a: &RegistryArgs, out: &mut dyn Write) -> Result<()> {
    let server = open_server(&a.root, a.passthrough, usize::MAX, None)?;
    let report = match &a.action {
        RegistryAction::List => {
            let reg = server.registry();
            let active = reg.active().map(|e| e.version);
            if cli.json {
                let entries: Vec<_> = reg
                    .entries()
                    .iter()
                    .map(|e| json!({"version": e.version, "model": e.model.to_hex(), "compressed": e.compressed.to_hex(),
                                    "active": Some(e.version) == active}))
                    .collect();
                return emit_json(out, &json!({"entries": entries, "activations": reg.activations()}));
            }
            for e in reg.entries() {
                let mark = if Some(e.version) == active { "*" } else { " " };
                writeln!(out, "{mark} v{:<4} model={} compressed={}", e.version, e.model.short(), e.compressed.short())?;
            }
            let hist: Vec<String> = reg.activations().iter().map(|v| format!("v{v}")).collect();
            writeln!(out, "activations: {}", if hist.is_empty() { "none".into() } else { hist.join(" ") })?;
            return Ok(());
        }
        RegistryAction::Publish { model } => server.publish(&load_model(model)?.artifact),
        RegistryAction::Activate { version } => server.activate(*version),
        RegistryAction::Rollback => server.rollback(),
        RegistryAction::Export { dir } => {
            let n = server.export_public(dir).map_err(CliError::failed)?;
            if cli.json {
                return emit_json(out, &json!({"exported": n, "dir": dir}));
            }
            writeln!(out, "exported {n} public scans to {}", dir.display())?;
            return Ok(());
        }
    }
    .map_err(CliError::failed)?;
    if cli.json {
        return emit_json(out, &serde_json::to_value(&report).map_err(CliError::failed)?);
    }
    writeln!(out, "{}", publish_line(&report))?;
    Ok(())
}

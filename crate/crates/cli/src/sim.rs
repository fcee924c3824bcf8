//! `simulate`: scenario scripts and the reference week over the simulated
//! dial-up link.

use std::io::Write;
use std::path::Path;

use cxr_core::dataset::SCAN_SIDE;
use cxr_core::nn::{LayerSpec, ModelArtifact, Network, ValMetrics};
use cxr_relay::client::Source;
use cxr_relay::protocol::{ledger_weekly_total, BandwidthLedger};
use cxr_relay::scenario::{run_scenario, Action, Scenario, ScenarioEnv, ScenarioOutcome, ScriptEvent};
use cxr_relay::server::ServerConfig;
use cxr_core::compress::CompressionConfig;
use serde_json::json;

use crate::args::SimulateArgs;
use crate::model::{load_model, small_network};
use crate::{emit_json, input, Cli, CliError, Result};

const DAY: f64 = 86_400.0;
const HOUR: f64 = 3_600.0;
/// Per-scan and per-request kilobytes in the weekly budget, and the model
/// size in megabytes.
pub const BUDGET_SCAN_KB: u64 = 17;
pub const BUDGET_OVERHEAD_KB: u64 = 1;
pub const BUDGET_MODEL_MB: u64 = 5;

/// Flatten, an 80-unit hidden layer and a two-way head over the full scan:
/// about 5.24 MB of raw f32 weights, the model size the weekly budget
/// assumes.
pub fn reference_week_network(seed: u64) -> Network {
    use LayerSpec::*;
    Network::new(vec![SCAN_SIDE, SCAN_SIDE, 1], vec![Flatten, Dense { units: 80 }, Relu, Dense { units: 2 }, Softmax], seed)
        .expect("consistent architecture")
}

/// One week of traffic at a site: the first model installed before the
/// week starts, `scans_per_day` scans spread over an eight-hour working
/// day, and one model update mid-week.
pub fn reference_week(scans_per_day: u64, seed: u64) -> Scenario {
    let mut events = Vec::new();
    let mut ev = |t: f64, action: Action| events.push(ScriptEvent { t, line: 0, action });
    ev(0.0, Action::Publish);
    ev(0.0, Action::Sync);
    let start = HOUR;
    ev(start, Action::WeekStart);
    let gap = 8.0 * HOUR / scans_per_day.max(1) as f64;
    for d in 0..7 {
        for i in 0..scans_per_day {
            ev(start + d as f64 * DAY + 8.0 * HOUR + i as f64 * gap, Action::Scan(None));
        }
        if d == 3 {
            ev(start + d as f64 * DAY + 2.0 * HOUR, Action::Publish);
            ev(start + d as f64 * DAY + 2.0 * HOUR, Action::Sync);
        }
    }
    let mut sc = Scenario::parse("").expect("empty script parses");
    sc.seed = seed;
    sc.events = events;
    sc
}

pub fn reference_week_models(seed: u64) -> Vec<ModelArtifact> {
    (1..=2).map(|v| ModelArtifact::seal(&reference_week_network(seed + v), v, None, ValMetrics::default())).collect()
}

/// Server and client state for a run under `dir`, models shipped raw.
pub fn sim_env(dir: &Path, models: Vec<ModelArtifact>) -> ScenarioEnv {
    let mut server = ServerConfig::new(dir.join("server"));
    server.compression = CompressionConfig::passthrough();
    server.fine_tune = None;
    ScenarioEnv { server, client_dir: dir.join("client"), models, held_out: None, client_id: "site".into() }
}

fn kb(bytes: u64) -> f64 {
    bytes as f64 / 1024.0
}

fn ledger_json(l: &BandwidthLedger) -> serde_json::Value {
    json!({"scans": l.scans, "requests": l.requests, "bytes_up": l.bytes_up, "bytes_down": l.bytes_down,
           "model_bytes": l.model_bytes, "total_kb": kb(l.bytes_up + l.bytes_down)})
}

pub(crate) fn run(cli: &Cli, a: &SimulateArgs, out: &mut dyn Write) -> Result<()> {
    let (sc, models) = if a.reference_week {
        if a.scans_per_day == 0 {
            return Err(CliError::Usage("--scans-per-day must be >= 1".into()));
        }
        let models = if a.models.is_empty() {
            reference_week_models(cli.seed)
        } else {
            a.models.iter().map(|p| load_model(p).map(|l| l.artifact)).collect::<Result<_>>()?
        };
        (reference_week(a.scans_per_day, cli.seed), models)
    } else {
        let path = a.script.as_deref().expect("clap requires a script or --reference-week");
        let text = std::fs::read_to_string(input(path)?)?;
        let sc = Scenario::parse(&text).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
        let models = if a.models.is_empty() {
            let n = sc.events.iter().filter(|e| e.action == Action::Publish).count() as u64;
            (1..=n).map(|v| ModelArtifact::seal(&small_network(cli.seed + v), v, None, ValMetrics::default())).collect()
        } else {
            a.models.iter().map(|p| load_model(p).map(|l| l.artifact)).collect::<Result<_>>()?
        };
        (sc, models)
    };

    let tmp;
    let dir = match &a.workdir {
        Some(d) => d.clone(),
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    let o = run_scenario(&sc, sim_env(&dir, models)).map_err(CliError::failed)?;
    if let Some(p) = &a.log {
        std::fs::write(p, o.log.join("\n") + "\n")?;
    }
    let budget = a.reference_week.then(|| {
        ledger_weekly_total(a.scans_per_day, BUDGET_SCAN_KB, BUDGET_OVERHEAD_KB, 1, BUDGET_MODEL_MB)
    });
    if cli.json {
        return emit_json(out, &summary_json(&o, budget, a.log.is_none()));
    }
    if a.log.is_none() {
        for line in &o.log {
            writeln!(out, "{line}")?;
        }
        writeln!(out)?;
    }
    write_summary(out, &o, budget)
}

fn summary_json(o: &ScenarioOutcome, budget: Option<u64>, with_log: bool) -> serde_json::Value {
    let local = o.results.iter().filter(|r| r.source == Source::Local).count();
    json!({
        "log": with_log.then_some(&o.log),
        "scans": o.results.len(),
        "local_scans": local,
        "syncs": o.syncs.len(),
        "cache_depth": o.cache_depth,
        "end_time": o.end_time,
        "ledger": ledger_json(&o.ledger),
        "counters": o.counters,
        "ledger_matches_counters": o.ledger.bytes_up == o.counters.bytes_up && o.ledger.bytes_down == o.counters.bytes_down,
        "week": o.week.as_ref().map(ledger_json),
        "weekly_budget_kb": budget,
        "client_model": o.client_digest.map(|d| d.to_hex()),
        "server_model": o.server_digest.map(|d| d.to_hex()),
    })
}

fn write_summary(out: &mut dyn Write, o: &ScenarioOutcome, budget: Option<u64>) -> Result<()> {
    let local = o.results.iter().filter(|r| r.source == Source::Local).count();
    let l = &o.ledger;
    writeln!(out, "scans {} ({} local), syncs {}, cache {} at t={:.3}", o.results.len(), local, o.syncs.len(), o.cache_depth, o.end_time)?;
    writeln!(out, "ledger up {} B, down {} B (model {} B), requests {}", l.bytes_up, l.bytes_down, l.model_bytes, l.requests)?;
    let same = l.bytes_up == o.counters.bytes_up && l.bytes_down == o.counters.bytes_down;
    writeln!(
        out,
        "simulator up {} B, down {} B: {}",
        o.counters.bytes_up,
        o.counters.bytes_down,
        if same { "matches the ledger" } else { "DIFFERS from the ledger" }
    )?;
    if let Some(w) = &o.week {
        writeln!(
            out,
            "week: {} scans, up {:.0} KB, down {:.0} KB (model {:.0} KB), measured total {:.0} KB",
            w.scans,
            kb(w.bytes_up),
            kb(w.bytes_down),
            kb(w.model_bytes),
            kb(w.bytes_up + w.bytes_down)
        )?;
    }
    if let Some(b) = budget {
        writeln!(out, "weekly total {b} KB")?;
    }
    match (o.client_digest, o.server_digest) {
        (Some(c), Some(s)) if c == s => writeln!(out, "client model {} (current)", c.short())?,
        (Some(c), Some(s)) => writeln!(out, "client model {}, server {}", c.short(), s.short())?,
        (None, _) => writeln!(out, "client has no model")?,
        (Some(c), None) => writeln!(out, "client model {}", c.short())?,
    }
    Ok(())
}

mod common;

use std::path::Path;
use std::time::Instant;

use common::*;
use cxr_core::nn::{LayerSpec, ModelArtifact, Network, ValMetrics};
use cxr_relay::client::{Source, UpdateOutcome};
use cxr_relay::netsim::LinkProfile;
use cxr_relay::scenario::{run_scenario, Scenario, ScenarioEnv, ScenarioOutcome};

const OFFLINE: &str = include_str!("data/offline.scn");

fn env(dir: &Path, models: Vec<ModelArtifact>) -> ScenarioEnv {
    ScenarioEnv {
        server: server_config(&dir.join("server")),
        client_dir: dir.join("client"),
        models,
        held_out: None,
        client_id: "site".into(),
    }
}

fn run_offline(dir: &Path) -> ScenarioOutcome {
    let sc = Scenario::parse(OFFLINE).unwrap();
    run_scenario(&sc, env(dir, vec![seal(&tiny_network(1), 1), seal(&tiny_network(2), 2)])).unwrap()
}

fn count(log: &[String], needle: &str) -> usize {
    log.iter().filter(|l| l.contains(needle)).count()
}

#[test]
fn offline_scenario_serves_flushes_and_updates() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_offline(dir.path());

    let sources: Vec<Source> = out.results.iter().map(|r| r.source).collect();
    assert_eq!(sources, [Source::Server, Source::Local, Source::Local, Source::Local, Source::Server]);

    // syncs: initial, reconnect at t=700, t=900, after the second publish
    assert_eq!(out.syncs.len(), 4, "{:#?}", out.syncs);
    assert!(matches!(out.syncs[0].update, UpdateOutcome::Installed { version: 1, .. }));
    let reconnect = &out.syncs[1];
    assert_eq!((reconnect.flushed_scans, reconnect.flushed_confirms), (3, 1));
    assert_eq!(reconnect.update, UpdateOutcome::UpToDate);
    assert_eq!(reconnect.model_bytes, 0);
    assert_eq!(out.syncs[2].update, UpdateOutcome::UpToDate);
    assert_eq!(out.syncs[2].model_bytes, 0);
    assert_eq!((out.syncs[2].flushed_scans, out.syncs[2].flushed_confirms), (0, 0));
    match &out.syncs[3].update {
        UpdateOutcome::Installed { version: 2, bytes, .. } => {
            // the whole artifact, plus per-chunk framing
            let got = out.syncs[3].model_bytes;
            assert!(got >= *bytes && got < *bytes + 256, "{got} vs {bytes}");
        }
        other => panic!("{other:?}"),
    }

    // each cached item crossed the wire once
    assert_eq!(count(&out.log, "send FlushBatch"), 4);
    assert_eq!(count(&out.log, "reconnect-sync"), 1);
    assert_eq!(out.cache_depth, 0);
    assert_eq!(out.server_scans, 5);

    assert!(out.client_digest.is_some());
    assert_eq!(out.client_digest, out.server_digest);
    let leftovers: Vec<String> = std::fs::read_dir(dir.path().join("client/model"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n != "active.cxrc")
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");

    assert_eq!((out.ledger.bytes_up, out.ledger.bytes_down), (out.counters.bytes_up, out.counters.bytes_down));
}

#[test]
fn offline_scenario_log_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let text = run_offline(dir.path()).log.join("\n") + "\n";
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/offline.log");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&golden, &text).unwrap();
    }
    let want = std::fs::read_to_string(&golden).expect("golden log missing; run with UPDATE_GOLDEN=1");
    assert_eq!(text, want);
}

#[test]
fn scenario_runs_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sc = Scenario::parse("seed 5\nt=0 publish\nt=0 sync\nt=10 scan\nt=20 outage 50\nt=30 scan\nt=40 scan\nt=90 confirm 2 no\n")
        .unwrap();
    let models = || vec![seal(&tiny_network(3), 1)];
    let x = run_scenario(&sc, env(a.path(), models())).unwrap();
    let y = run_scenario(&sc, env(b.path(), models())).unwrap();
    assert_eq!(x.log, y.log);
    assert_eq!(x.ledger, y.ledger);
}

#[test]
fn permanent_outage_keeps_serving_and_queueing() {
    let dir = tempfile::tempdir().unwrap();
    let sc = Scenario::parse("seed 2\nt=0 publish\nt=0 sync\nt=5 outage forever\nt=10 scan\nt=20 scan\nt=30 scan\nt=40 confirm 1 yes\n")
        .unwrap();
    let out = run_scenario(&sc, env(dir.path(), vec![seal(&tiny_network(4), 1)])).unwrap();
    assert!(out.results.iter().all(|r| r.source == Source::Local));
    assert_eq!(out.cache_depth, 4);
    let depths: Vec<&str> =
        out.log.iter().filter(|l| l.contains(" scan site-")).map(|l| l.rsplit("cache=").next().unwrap()).collect();
    assert_eq!(depths, ["1", "2", "3"]);
    assert_eq!(count(&out.log, "send FlushBatch"), 0);
}

#[test]
fn confirm_of_unserved_scan_is_a_run_error() {
    let dir = tempfile::tempdir().unwrap();
    let sc = Scenario::parse("t=1 confirm 1 yes").unwrap();
    assert!(run_scenario(&sc, env(dir.path(), vec![])).is_err());
}

/// Dense head sized so the passthrough container is about 6.9e6 bytes.
fn dialup_artifact() -> ModelArtifact {
    use LayerSpec::*;
    let net = Network::new(vec![750, 1150, 1], vec![Flatten, Dense { units: 2 }, Softmax], 1).unwrap();
    ModelArtifact::seal(&net, 1, None, ValMetrics::default())
}

#[test]
fn six_point_nine_megabytes_take_about_sixteen_minutes() {
    let wall = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let sc = Scenario { profile: LinkProfile::dialup(), seed: 0, sync_every: None, events: vec![] };
    let sc = Scenario { events: Scenario::parse("t=0 publish\nt=0 sync").unwrap().events, ..sc };
    let out = run_scenario(&sc, env(dir.path(), vec![dialup_artifact()])).unwrap();
    let UpdateOutcome::Installed { bytes, .. } = out.syncs[0].update else { panic!("{:?}", out.syncs[0]) };
    assert!((bytes as f64 - 6.9e6).abs() < 0.01 * 6.9e6, "{bytes}");
    let minutes = out.end_time / 60.0;
    // 6.9e6 bytes of payload alone is 985.7 s at 56 kbit/s
    assert!(out.end_time > 6.9e6 * 8.0 / 56_000.0);
    assert!((15.0..=18.0).contains(&minutes), "{minutes:.2} min");
    assert!(wall.elapsed().as_secs_f64() < 5.0, "{:?}", wall.elapsed());
}

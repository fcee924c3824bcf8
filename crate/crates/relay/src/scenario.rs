//! Scripted client/server runs over the simulated link.
//!
//! ```text
//! # directives
//! profile bandwidth=56 latency=100
//! seed 7
//! sync_every 21600            # seconds, or "off"
//! # timed actions
//! t=0 publish                 # activate the next supplied model
//! t=0 sync
//! t=10 scan pneumonia         # class optional; drawn from the seed otherwise
//! t=20 outage 300             # seconds, or "forever"
//! t=400 confirm 1 yes         # 1-based scan number
//! t=500 retrain
//! t=0 week_start              # start the ledger window reported separately
//! ```
//!
//! With automatic sync on, the client also syncs when each outage ends and
//! every `sync_every` seconds up to the last scripted event.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::PathBuf;
use std::sync::Arc;

use cxr_core::dataset::Sample;
use cxr_core::metrics::Class;
use cxr_core::nn::ModelArtifact;
use cxr_core::synthetic::disc_scan;
use cxr_core::Digest;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::client::{Client, ClientConfig, ScanResult, SyncReport, UpdateOutcome};
use crate::link::Endpoint;
use crate::netsim::{LinkProfile, Outage, SimCounters, SimNet};
use crate::protocol::BandwidthLedger;
use crate::server::{RetrainReport, Server, ServerConfig};

pub const DEFAULT_SYNC_EVERY: f64 = 6.0 * 3600.0;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("at t={t:.3}: {msg}")]
    Run { t: f64, msg: String },
    #[error("setup: {0}")]
    Setup(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Scan(Option<Class>),
    Confirm { scan: usize, confirmed: bool },
    Outage { duration: f64 },
    Publish,
    Sync,
    Retrain,
    WeekStart,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptEvent {
    pub t: f64,
    pub line: usize,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub profile: LinkProfile,
    pub seed: u64,
    /// `None` turns off the periodic and reconnect syncs.
    pub sync_every: Option<f64>,
    pub events: Vec<ScriptEvent>,
}

fn parse_time(s: &str) -> Option<f64> {
    let v: f64 = s.parse().ok()?;
    (v.is_finite() && v >= 0.0).then_some(v)
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let mut sc = Scenario { profile: LinkProfile::dialup(), seed: 0, sync_every: Some(DEFAULT_SYNC_EVERY), events: Vec::new() };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |msg: String| ScenarioError::Parse { line, msg };
            let words: Vec<&str> = raw.split('#').next().unwrap_or("").split_whitespace().collect();
            let Some((&head, rest)) = words.split_first() else { continue };
            if let Some(t) = head.strip_prefix("t=") {
                let t = parse_time(t).ok_or_else(|| err(format!("bad time {t:?}")))?;
                let (&verb, args) = rest.split_first().ok_or_else(|| err("missing action".into()))?;
                let action = match (verb, args) {
                    ("scan", []) => Action::Scan(None),
                    ("scan", [c]) => Action::Scan(Some(c.parse().map_err(|e: String| err(e))?)),
                    ("confirm", [n, yn]) => Action::Confirm {
                        scan: n.parse().ok().filter(|&n: &usize| n >= 1).ok_or_else(|| err(format!("bad scan number {n:?}")))?,
                        confirmed: match *yn {
                            "yes" | "confirm" | "1" => true,
                            "no" | "reject" | "0" => false,
                            other => return Err(err(format!("expected yes/no, got {other:?}"))),
                        },
                    },
                    ("outage", ["forever"]) => Action::Outage { duration: f64::INFINITY },
                    ("outage", [d]) => Action::Outage {
                        duration: parse_time(d).filter(|&d| d > 0.0).ok_or_else(|| err(format!("bad duration {d:?}")))?,
                    },
                    ("publish", []) => Action::Publish,
                    ("sync", []) => Action::Sync,
                    ("retrain", []) => Action::Retrain,
                    ("week_start", []) => Action::WeekStart,
                    _ => return Err(err(format!("unknown action {:?}", rest.join(" ")))),
                };
                sc.events.push(ScriptEvent { t, line, action });
                continue;
            }
            match (head, rest) {
                ("seed", [s]) => sc.seed = s.parse().map_err(|_| err(format!("bad seed {s:?}")))?,
                ("sync_every", ["off"]) => sc.sync_every = None,
                ("sync_every", [s]) => {
                    sc.sync_every = Some(parse_time(s).filter(|&v| v > 0.0).ok_or_else(|| err(format!("bad interval {s:?}")))?)
                }
                ("profile", kvs) if !kvs.is_empty() => {
                    for kv in kvs {
                        let (k, v) = kv.split_once('=').ok_or_else(|| err(format!("expected key=value, got {kv:?}")))?;
                        let v: f64 = v.parse().map_err(|_| err(format!("bad number {v:?}")))?;
                        match k {
                            "bandwidth" => sc.profile.bandwidth_kbps = v,
                            "latency" => sc.profile.latency_ms = v,
                            _ => return Err(err(format!("unknown profile key {k:?}"))),
                        }
                    }
                }
                _ => return Err(err(format!("unknown directive {:?}", words.join(" ")))),
            }
        }
        let mut outages: Vec<Outage> = sc
            .events
            .iter()
            .filter_map(|e| match e.action {
                Action::Outage { duration } => Some(Outage { start: e.t, end: e.t + duration }),
                _ => None,
            })
            .collect();
        outages.sort_by(|a, b| a.start.total_cmp(&b.start));
        sc.profile.outages = outages;
        sc.profile.validate().map_err(|e| ScenarioError::Parse { line: 0, msg: e.to_string() })?;
        Ok(sc)
    }

    /// Last scripted instant.
    pub fn end_time(&self) -> f64 {
        self.events.iter().map(|e| e.t).fold(0.0, f64::max)
    }
}

#[derive(Debug)]
pub struct ScenarioEnv {
    pub server: ServerConfig,
    pub client_dir: PathBuf,
    /// Consumed in order by `publish`.
    pub models: Vec<ModelArtifact>,
    pub held_out: Option<Vec<Sample>>,
    pub client_id: String,
}

#[derive(Debug)]
pub struct ScenarioOutcome {
    pub log: Vec<String>,
    pub ledger: BandwidthLedger,
    pub counters: SimCounters,
    /// Traffic since `week_start`, if the script marked one.
    pub week: Option<BandwidthLedger>,
    pub results: Vec<ScanResult>,
    pub syncs: Vec<SyncReport>,
    pub retrains: Vec<RetrainReport>,
    pub cache_depth: usize,
    pub client_digest: Option<Digest>,
    pub server_digest: Option<Digest>,
    pub server_scans: usize,
    pub end_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Script(Action),
    Reconnect,
    Periodic,
}

#[derive(Debug)]
struct Queued {
    t: f64,
    seq: usize,
    kind: Kind,
}

impl PartialEq for Queued {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Queued {
    // min-heap on (t, seq)
    fn cmp(&self, o: &Self) -> Ordering {
        o.t.total_cmp(&self.t).then(o.seq.cmp(&self.seq))
    }
}

fn update_text(u: &UpdateOutcome) -> String {
    match u {
        UpdateOutcome::NotChecked { reason } => format!("not-checked ({reason})"),
        UpdateOutcome::UpToDate => "up-to-date".into(),
        UpdateOutcome::Installed { version, digest, bytes } => format!("installed v{version} {} {bytes}B", &digest[..12]),
        UpdateOutcome::Partial { have, total } => format!("partial {have}/{total}B"),
        UpdateOutcome::Rejected { reason } => format!("rejected ({reason})"),
    }
}

pub fn run_scenario(sc: &Scenario, env: ScenarioEnv) -> Result<ScenarioOutcome, ScenarioError> {
    let setup = |e: &dyn std::fmt::Display| ScenarioError::Setup(e.to_string());
    let net = SimNet::shared(sc.profile.clone()).map_err(|e| setup(&e))?;
    let server = Arc::new(Server::open(env.server, env.held_out).map_err(|e| setup(&e))?);
    let endpoint: Arc<dyn Endpoint> = server.clone();
    let mut ccfg = ClientConfig::new(&env.client_dir, env.client_id);
    ccfg.link = Some(sc.profile.clone());
    let client = Client::open(
        ccfg,
        Box::new(net.link(endpoint.clone())),
        Box::new(net.link(endpoint)),
        Arc::new(net.clock()),
    )
    .map_err(|e| setup(&e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let mut models = env.models.into_iter();
    let mut heap = BinaryHeap::new();
    let mut seq = 0;
    let mut push = |heap: &mut BinaryHeap<Queued>, t: f64, kind: Kind| {
        heap.push(Queued { t, seq, kind });
        seq += 1;
    };
    for e in &sc.events {
        push(&mut heap, e.t, Kind::Script(e.action.clone()));
    }
    let end = sc.end_time();
    if let Some(every) = sc.sync_every {
        for o in &sc.profile.outages {
            if o.end.is_finite() && o.end <= end {
                push(&mut heap, o.end, Kind::Reconnect);
            }
        }
        let mut t = every;
        while t <= end {
            push(&mut heap, t, Kind::Periodic);
            t += every;
        }
    }

    let mut out = ScenarioOutcome {
        log: Vec::new(),
        ledger: BandwidthLedger::default(),
        counters: SimCounters::default(),
        week: None,
        results: Vec::new(),
        syncs: Vec::new(),
        retrains: Vec::new(),
        cache_depth: 0,
        client_digest: None,
        server_digest: None,
        server_scans: 0,
        end_time: 0.0,
    };
    let mut week_mark: Option<BandwidthLedger> = None;
    let note = |msg: String| net.lock().note(msg);
    let sync = |label: &str, out: &mut ScenarioOutcome| -> Result<(), ScenarioError> {
        let r = client.sync_cycle().map_err(|e| ScenarioError::Run { t: net.lock().now(), msg: e.to_string() })?;
        let flush = match &r.flush_error {
            Some(e) => format!(" flush-error=({e})"),
            None => String::new(),
        };
        note(format!(
            "{label} flushed={} confirms={} update={} model_bytes={}{flush} cache={}",
            r.flushed_scans,
            r.flushed_confirms,
            update_text(&r.update),
            r.model_bytes,
            client.cache_depth()
        ));
        out.syncs.push(r);
        Ok(())
    };

    while let Some(q) = heap.pop() {
        net.lock().advance_to(q.t);
        let fail = |msg: String| ScenarioError::Run { t: q.t, msg };
        match q.kind {
            Kind::Reconnect => {
                note("link restored".into());
                sync("reconnect-sync", &mut out)?;
            }
            Kind::Periodic => sync("periodic-sync", &mut out)?,
            Kind::Script(action) => match action {
                Action::Scan(class) => {
                    let truth = class.unwrap_or_else(|| if rng.gen_bool(0.5) { Class::Pneumonia } else { Class::Normal });
                    let img = disc_scan(truth, &mut rng);
                    match client.handle_scan(&img) {
                        Ok(r) => {
                            note(format!(
                                "scan {} truth={} source={} p={:.4} verdict={} v{} cache={}",
                                r.scan_id,
                                truth,
                                r.source.as_str(),
                                r.probability,
                                r.verdict,
                                r.model_version,
                                client.cache_depth()
                            ));
                            out.results.push(r);
                        }
                        Err(e) => note(format!("scan failed: {e}")),
                    }
                }
                Action::Confirm { scan, confirmed } => {
                    let id = out
                        .results
                        .get(scan - 1)
                        .map(|r| r.scan_id.clone())
                        .ok_or_else(|| fail(format!("confirm refers to scan {scan}, only {} served", out.results.len())))?;
                    match client.record_confirmation(&id, confirmed) {
                        Ok(a) => note(format!(
                            "confirm {id} {} {}",
                            if confirmed { "yes" } else { "no" },
                            if a.delivered { "delivered" } else { "queued" }
                        )),
                        Err(e) => note(format!("confirm {id} failed: {e}")),
                    }
                }
                Action::Outage { duration } => {
                    if duration.is_finite() {
                        note(format!("outage until t={:.3}", q.t + duration));
                    } else {
                        note("outage forever".into());
                    }
                }
                Action::Publish => {
                    let art = models.next().ok_or_else(|| fail("publish: no more models supplied".into()))?;
                    let r = server.publish(&art).map_err(|e| fail(e.to_string()))?;
                    note(format!(
                        "publish v{} model={} compressed={} {}B",
                        r.version,
                        &r.model_digest[..12],
                        &r.compressed_digest[..12],
                        r.compressed_bytes
                    ));
                }
                Action::Sync => sync("sync", &mut out)?,
                Action::Retrain => {
                    let r = server.retrain_and_maybe_replace().map_err(|e| fail(e.to_string()))?;
                    note(format!("retrain {}", serde_json::to_string(&r).expect("serializable")));
                    out.retrains.push(r);
                }
                Action::WeekStart => {
                    week_mark = Some(client.ledger());
                    note("week start".into());
                }
            },
        }
    }

    let g = net.lock();
    out.end_time = g.now();
    out.counters = g.counters();
    drop(g);
    out.log = net.lock().take_log();
    out.ledger = client.ledger();
    out.week = week_mark.map(|m| out.ledger.since(&m));
    out.cache_depth = client.cache_depth();
    out.client_digest = client.model_digest();
    out.server_digest = server.active().map(|a| a.compressed_digest());
    out.server_scans = server.store().len();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_script() {
        let sc = Scenario::parse(
            "profile bandwidth=28.8 latency=150\nseed 9\nsync_every off\n\
             t=0 publish\nt=1 scan\nt=2 scan normal # c\nt=3 outage 10\nt=20 outage forever\nt=30 confirm 2 no\n",
        )
        .unwrap();
        assert_eq!(sc.seed, 9);
        assert_eq!(sc.sync_every, None);
        assert_eq!(sc.profile.bandwidth_kbps, 28.8);
        assert_eq!(sc.events.len(), 6);
        assert_eq!(sc.events[2].action, Action::Scan(Some(Class::Normal)));
        assert_eq!(sc.profile.outages, vec![Outage { start: 3.0, end: 13.0 }, Outage { start: 20.0, end: f64::INFINITY }]);
        assert_eq!(sc.events[5].action, Action::Confirm { scan: 2, confirmed: false });
        assert_eq!(sc.end_time(), 30.0);
    }

    #[test]
    fn malformed_scripts_name_the_line() {
        for (text, line) in [
            ("t=x scan", 1),
            ("seed 1\nt=1 dance", 2),
            ("t=1 confirm 0 yes", 1),
            ("t=1 outage -4", 1),
            ("profile speed=3", 1),
            ("\n\nwhatever", 3),
        ] {
            match Scenario::parse(text) {
                Err(ScenarioError::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
        assert!(Scenario::parse("t=1 outage 10\nt=5 outage 10").is_err());
    }
}

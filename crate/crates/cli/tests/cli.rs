//! The `cxr` binary as an operator sees it: help text, exit codes, file
//! outputs and the two long-running services.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use clap::CommandFactory;
use cxr_cli::model::load_model;
use cxr_cli::Cli;
use cxr_core::metrics::Class;
use cxr_core::synthetic::disc_scan;
use cxr_core::GrayImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn cxr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cxr")).args(args).env_remove("CXR_ROOT").env_remove("CXR_ADDR").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = cxr(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Train the small architecture on synthetic scans into `dir/name`.
fn trained(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let out = dir.join(name);
    ok(&["--seed", &seed.to_string(), "train", "--synthetic", "40", "--arch", "small", "--epochs", "2", "--out", s(&out)]);
    out
}

fn golden(name: &str, actual: &str) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/help").join(format!("{name}.txt"));
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e} (run with UPDATE_GOLDEN=1)", path.display()));
    assert_eq!(actual, want, "help for {name} changed; rerun with UPDATE_GOLDEN=1 if intended");
}

const SUBCOMMANDS: [&str; 8] = ["train", "compress", "serve", "client", "simulate", "report", "heatmap", "registry"];

#[test]
fn help_text_matches_golden_files() {
    golden("cxr", &ok(&["--help"]));
    for sub in SUBCOMMANDS {
        golden(sub, &ok(&[sub, "--help"]));
    }
    for action in ["list", "publish", "activate", "rollback", "export"] {
        golden(&format!("registry-{action}"), &ok(&["registry", action, "--help"]));
    }
}

#[test]
fn every_flag_is_documented() {
    fn walk(cmd: &clap::Command, path: &str) {
        for arg in cmd.get_arguments() {
            let id = arg.get_id().as_str();
            if id == "help" || id == "version" {
                continue;
            }
            assert!(arg.get_help().is_some(), "{path} --{id} has no help text");
        }
        for sub in cmd.get_subcommands() {
            assert!(sub.get_about().is_some(), "{path} {} has no description", sub.get_name());
            walk(sub, &format!("{path} {}", sub.get_name()));
        }
    }
    walk(&Cli::command(), "cxr");
    Cli::command().debug_assert();
}

#[test]
fn exit_codes_separate_usage_from_failure() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cxr(&["train", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(cxr(&["train"]).status.code(), Some(2));
    assert_eq!(cxr(&["report", s(&dir.path().join("absent.txt"))]).status.code(), Some(2));
    assert_eq!(cxr(&["compress", s(&dir.path().join("absent.cxrm"))]).status.code(), Some(2));

    let bad = dir.path().join("bad.cxrm");
    std::fs::write(&bad, b"not a model at all").unwrap();
    let o = cxr(&["compress", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());

    let model = trained(dir.path(), "m.cxrm", 1);
    let mut bytes = std::fs::read(&model).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let flipped = dir.path().join("flipped.cxrm");
    std::fs::write(&flipped, bytes).unwrap();
    assert_eq!(cxr(&["compress", s(&flipped)]).status.code(), Some(1));
}

#[test]
fn report_on_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("pred.txt");
    std::fs::write(&p, "# label score\nnormal 0.1\nnormal 0.2\npneumonia,0.8\npneumonia 0.95\n").unwrap();
    let text = ok(&["report", s(&p)]);
    assert!(text.contains("AUC 1.0000"), "{text}");
    let v: Value = serde_json::from_str(&ok(&["--json", "report", s(&p)])).unwrap();
    assert_eq!(v["report"]["accuracy"], 1.0);
    assert_eq!(v["n"], 4);
    assert_eq!(v["auc"], 1.0);
}

#[test]
fn train_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = std::fs::read(trained(dir.path(), "a.cxrm", 4)).unwrap();
    let b = std::fs::read(trained(dir.path(), "b.cxrm", 4)).unwrap();
    let c = std::fs::read(trained(dir.path(), "c.cxrm", 5)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(dir.path().join("a.report.json").exists());
    let hist = std::fs::read_to_string(dir.path().join("a.history.csv")).unwrap();
    assert_eq!(hist.lines().count(), 3, "{hist}");
}

#[test]
fn compress_then_resume_keeps_lineage() {
    let dir = tempfile::tempdir().unwrap();
    let base = trained(dir.path(), "base.cxrm", 2);
    let text = ok(&["compress", s(&base), "--eval-synthetic", "20"]);
    assert!(text.contains("ratio") && text.contains("argmax agreement"), "{text}");
    let packed = base.with_extension("cxrc");
    let original = load_model(&base).unwrap().artifact;

    let next = dir.path().join("next.cxrm");
    ok(&["train", "--synthetic", "40", "--arch", "small", "--epochs", "1", "--resume", s(&packed), "--out", s(&next)]);
    let child = load_model(&next).unwrap().artifact;
    assert_eq!(child.parent(), Some(original.digest()));
    assert_eq!(child.version(), original.version() + 1);

    let third = dir.path().join("third.cxrm");
    ok(&["train", "--synthetic", "40", "--arch", "small", "--epochs", "1", "--resume", s(&next), "--model-version", "9", "--out", s(&third)]);
    let grandchild = load_model(&third).unwrap().artifact;
    assert_eq!(grandchild.parent(), Some(child.digest()));
    assert_eq!(grandchild.version(), 9);
}

#[test]
fn simulate_is_deterministic_and_reports_the_budget() {
    let dir = tempfile::tempdir().unwrap();
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("../relay/tests/data/offline.scn");
    let a = ok(&["simulate", s(&script)]);
    let b = ok(&["simulate", s(&script)]);
    assert_eq!(a, b);
    assert!(a.contains("matches the ledger"), "{a}");
    let log = dir.path().join("run.log");
    let summary = ok(&["simulate", s(&script), "--log", s(&log)]);
    assert!(!summary.contains("send FlushBatch"));
    assert!(std::fs::read_to_string(&log).unwrap().contains("send FlushBatch"));

    let week = ok(&["simulate", "--reference-week", "--scans-per-day", "10"]);
    assert!(week.contains("weekly total 6380 KB"), "{week}");
    assert!(week.contains("measured total"));
    let v: Value = serde_json::from_str(&ok(&["--json", "simulate", "--reference-week", "--scans-per-day", "10"])).unwrap();
    assert_eq!(v["weekly_budget_kb"], 6380);
    assert_eq!(v["ledger_matches_counters"], true);
    assert_eq!(v["week"]["scans"], 70);
}

#[test]
fn heatmap_writes_a_scan_sized_overlay() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained(dir.path(), "m.cxrm", 3);
    let img = dir.path().join("scan.pgm");
    disc_scan(Class::Pneumonia, &mut ChaCha8Rng::seed_from_u64(1)).write_pgm(&img).unwrap();
    let out = dir.path().join("heat.pgm");
    let text = ok(&["heatmap", "--model", s(&model), "--image", s(&img), "--out", s(&out)]);
    assert!(text.contains("p(pneumonia)="), "{text}");
    let heat = GrayImage::read_pgm(&out).unwrap();
    assert_eq!((heat.width(), heat.height()), (128, 128));
    assert_eq!(cxr(&["heatmap", "--model", s(&model), "--image", s(&img), "--out", s(&out), "--patch", "0"]).status.code(), Some(2));
}

#[test]
fn registry_publish_activate_rollback_export() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("root");
    let (m1, m2) = (trained(dir.path(), "m1.cxrm", 1), trained(dir.path(), "m2.cxrm", 2));
    let r = s(&root);
    assert!(ok(&["registry", "--root", r, "--passthrough", "publish", s(&m1)]).starts_with("active v1"));
    assert!(ok(&["registry", "--root", r, "--passthrough", "publish", s(&m2)]).starts_with("active v2"));
    let list = ok(&["registry", "--root", r, "list"]);
    assert!(list.contains("* v2"), "{list}");
    assert!(list.contains("activations: v1 v2"), "{list}");
    assert!(ok(&["registry", "--root", r, "rollback"]).starts_with("active v1"));
    assert!(ok(&["registry", "--root", r, "activate", "2"]).starts_with("active v2"));
    assert_eq!(cxr(&["registry", "--root", r, "activate", "7"]).status.code(), Some(1));
    let v: Value = serde_json::from_str(&ok(&["--json", "registry", "--root", r, "list"])).unwrap();
    assert_eq!(v["activations"], serde_json::json!([1, 2, 1, 2]));
    let out = dir.path().join("public");
    assert!(ok(&["registry", "--root", r, "export", s(&out)]).contains("exported 0 public scans"));
}

#[test]
fn root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let m = trained(dir.path(), "m.cxrm", 1);
    let root = dir.path().join("env-root");
    let o = Command::new(env!("CARGO_BIN_EXE_cxr"))
        .args(["registry", "--passthrough", "publish", s(&m)])
        .env("CXR_ROOT", &root)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(root.join("registry").exists());
    assert_eq!(cxr(&["registry", "list"]).status.code(), Some(2), "no root anywhere is a usage error");
}

/// Kills the child when the test ends, pass or fail.
struct Service(Child);

impl Drop for Service {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn spawn(args: &[&str], prefix: &str) -> (Service, String) {
    let mut child = Command::new(env!("CARGO_BIN_EXE_cxr")).args(args).stdout(Stdio::piped()).stderr(Stdio::null()).spawn().unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let svc = Service(child);
    for line in lines.by_ref() {
        if let Some(rest) = line.unwrap().strip_prefix(prefix) {
            return (svc, rest.trim().to_string());
        }
    }
    panic!("{args:?} exited before printing {prefix:?}");
}

fn http(addr: SocketAddr, method: &str, path: &str, body: &[u8]) -> (u16, Value) {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(s, "{method} {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\nContent-Length: {}\r\n\r\n", body.len()).unwrap();
    s.write_all(body).unwrap();
    let mut raw = Vec::new();
    s.read_to_end(&mut raw).unwrap();
    let split = raw.windows(4).position(|w| w == b"\r\n\r\n").unwrap();
    let status = String::from_utf8_lossy(&raw[..split]).split_whitespace().nth(1).unwrap().parse().unwrap();
    (status, serde_json::from_slice(&raw[split + 4..]).unwrap())
}

#[test]
fn serve_and_client_talk_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained(dir.path(), "m.cxrm", 1);
    let root = dir.path().join("root");
    let (_server, addr) = spawn(
        &["serve", "--root", s(&root), "--addr", "127.0.0.1:0", "--publish", s(&model), "--passthrough"],
        "listening on ",
    );
    let (_client, api) = spawn(
        &["client", "--data-dir", s(&dir.path().join("edge")), "--server", &addr, "--http", "127.0.0.1:0", "--client-id", "site"],
        "api on http://",
    );
    let api: SocketAddr = api.parse().unwrap();

    let deadline = Instant::now() + Duration::from_secs(30);
    loop {
        let (st, status) = http(api, "GET", "/api/status", b"");
        assert_eq!(st, 200);
        if status["model"]["version"] == 1 {
            break;
        }
        assert!(Instant::now() < deadline, "client never installed the model: {status}");
        std::thread::sleep(Duration::from_millis(100));
    }
    let pgm = disc_scan(Class::Normal, &mut ChaCha8Rng::seed_from_u64(3)).to_pgm();
    let (st, scan) = http(api, "POST", "/api/scan", &pgm);
    assert_eq!(st, 200, "{scan}");
    assert_eq!(scan["source"], "server");
    assert_eq!(scan["model_version"], 1);
    let id = scan["scan_id"].as_str().unwrap();
    let (st, ack) = http(api, "POST", "/api/confirm", format!(r#"{{"scan_id":"{id}","confirmed":true}}"#).as_bytes());
    assert_eq!(st, 200, "{ack}");
    let (st, _) = http(api, "POST", "/api/scan", b"P5 garbage");
    assert_eq!(st, 400);
}

#[test]
fn client_without_a_server_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = cxr(&["client", "--data-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

mod common;

use std::sync::Arc;
use std::thread;

use common::*;
use cxr_core::dataset::{Label, ScanId, ScanRecord, Section};
use cxr_core::metrics::Class;
use cxr_core::nn::measure;
use cxr_core::synthetic::disc_dataset;
use cxr_core::Digest;
use cxr_relay::link::Endpoint;
use cxr_relay::protocol::{
    decode_frame, encode_frame, Confirmation, ErrorCode, Message, PredictRequest, PredictResponse, RequestMeta,
};
use cxr_relay::server::{PolicyMetric, RetrainReport, Server, ServerError};

fn predict_req(id: &str, class: Class, seed: u64) -> Message {
    Message::PredictReq(PredictRequest {
        meta: RequestMeta { scan_id: id.into(), deployment: "t".into(), ..RequestMeta::default() },
        image: scan_image(class, seed).data().to_vec(),
    })
}

fn predict(server: &Server, id: &str, class: Class, seed: u64) -> PredictResponse {
    match server.handle(predict_req(id, class, seed)) {
        Message::PredictResp(r) => r,
        other => panic!("{other:?}"),
    }
}

#[test]
fn predict_reply_is_small_and_duplicates_are_not_reingested() {
    let dir = tempfile::tempdir().unwrap();
    let server = open_server(dir.path(), None);
    assert!(matches!(server.handle(predict_req("a-000001", Class::Normal, 1)), Message::Error { code, .. } if code == ErrorCode::Unavailable as u16));
    server.publish(&seal(&tiny_network(1), 1)).unwrap();

    let frame = encode_frame(&predict_req("a-000001", Class::Pneumonia, 1)).unwrap();
    let reply = server.handle_frame(&frame);
    assert!(reply.len() < 300, "{}", reply.len());
    let Message::PredictResp(first) = decode_frame(&reply).unwrap() else { panic!() };
    assert!((0.0..=1.0).contains(&first.probability));
    assert_eq!(first.model_version, 1);
    assert!(first.update_hint, "a client holding no model is told to update");

    // same id, even with a different image, answers from the first request
    let again = predict(&server, "a-000001", Class::Normal, 2);
    assert_eq!(again, first);
    assert_eq!(server.store().len(), 1);
    assert_eq!(server.store().count_section(Section::Private), 1);

    let held = server.active().unwrap().compressed_digest();
    let hinted = server.handle(Message::PredictReq(PredictRequest {
        meta: RequestMeta { scan_id: "a-000002".into(), client_model: held, ..RequestMeta::default() },
        image: scan_image(Class::Normal, 3).data().to_vec(),
    }));
    assert!(matches!(hinted, Message::PredictResp(PredictResponse { update_hint: false, .. })));
}

#[test]
fn malformed_frames_get_error_frames() {
    let dir = tempfile::tempdir().unwrap();
    let server = open_server(dir.path(), None);
    let mut bad = encode_frame(&Message::UpdateNone).unwrap();
    bad[9] ^= 1;
    let Message::Error { code, .. } = decode_frame(&server.handle_frame(&bad)).unwrap() else { panic!() };
    assert_eq!(code, ErrorCode::BadChecksum as u16);
    let Message::Error { code, .. } = decode_frame(&server.handle_frame(b"nonsense")).unwrap() else { panic!() };
    assert_eq!(code, ErrorCode::BadLength as u16);
    let reply = server.handle(Message::UpdateNone);
    assert!(matches!(reply, Message::Error { code, .. } if code == ErrorCode::Malformed as u16));
    let reply = server.handle(Message::ConfirmReq(Confirmation { scan_id: "nobody-000001".into(), confirmed: true, verdict: Class::Normal }));
    assert!(matches!(reply, Message::Error { code, .. } if code == ErrorCode::NotFound as u16));
}

#[test]
fn update_check_and_chunks() {
    let dir = tempfile::tempdir().unwrap();
    let server = open_server(dir.path(), None);
    server.publish(&seal(&wide_network(4), 1)).unwrap();
    let active = server.active().unwrap();
    let d = active.compressed_digest();
    assert_eq!(server.handle(Message::UpdateCheck { digest: d }), Message::UpdateNone);
    let Message::UpdateAvail { digest, size, version } = server.handle(Message::UpdateCheck { digest: Digest::default() }) else { panic!() };
    assert_eq!((digest, version), (d, 1));
    let mut got = Vec::new();
    while (got.len() as u64) < size {
        match server.handle(Message::ModelChunk { digest: d, offset: got.len() as u64, data: Vec::new() }) {
            Message::ModelChunk { data, .. } => got.extend(data),
            other => panic!("{other:?}"),
        }
    }
    assert_eq!(got, active.compressed.as_bytes());
    let past = server.handle(Message::ModelChunk { digest: d, offset: size, data: Vec::new() });
    assert!(matches!(past, Message::Error { .. }));
    let stale = server.handle(Message::ModelChunk { digest: Digest::of(b"old"), offset: 0, data: Vec::new() });
    assert!(matches!(stale, Message::Error { code, .. } if code == ErrorCode::NotFound as u16));
}

#[test]
fn requests_during_swaps_are_served_by_exactly_one_version() {
    let dir = tempfile::tempdir().unwrap();
    let server = open_server(dir.path(), None);
    let r1 = server.publish(&seal(&tiny_network(1), 1)).unwrap();
    let r2 = server.publish(&seal(&tiny_network(2), 2)).unwrap();
    assert_eq!((r1.version, r2.version), (1, 2));
    let img = scan_image(Class::Pneumonia, 42);
    let mut expect = std::collections::HashMap::new();
    for v in [1u64, 2] {
        server.activate(v).unwrap();
        let a = server.active().unwrap();
        let (p, verdict) = a.predict(&img).unwrap();
        expect.insert(v, (p as f32, verdict, a.compressed_digest()));
    }
    assert_ne!(expect[&1].0, expect[&2].0);

    let swapper = {
        let s = server.clone();
        thread::spawn(move || {
            for i in 0..60 {
                s.activate(1 + i % 2).unwrap();
                thread::yield_now();
            }
        })
    };
    let workers: Vec<_> = (0..3)
        .map(|w| {
            let s = server.clone();
            let data = img.data().to_vec();
            thread::spawn(move || {
                (0..80)
                    .map(|i| {
                        let m = Message::PredictReq(PredictRequest {
                            meta: RequestMeta { scan_id: format!("w{w}-{i:06}"), ..RequestMeta::default() },
                            image: data.clone(),
                        });
                        match s.handle(m) {
                            Message::PredictResp(r) => r,
                            other => panic!("{other:?}"),
                        }
                    })
                    .collect::<Vec<_>>()
            })
        })
        .collect();
    swapper.join().unwrap();
    let mut seen = std::collections::BTreeSet::new();
    for w in workers {
        for r in w.join().unwrap() {
            let (p, verdict, digest) = expect[&r.model_version];
            assert_eq!((r.probability, r.verdict, r.model_digest), (p, verdict, digest), "{}", r.scan_id);
            seen.insert(r.model_version);
        }
    }
    assert!(!seen.is_empty());
}

fn labeled_batch(server: &Server, n: usize, seed: u64, truthful: bool) {
    for (i, s) in disc_dataset(n, seed).into_iter().enumerate() {
        let id = format!("lab{seed}-{i:06}");
        let m = Message::PredictReq(PredictRequest {
            meta: RequestMeta { scan_id: id.clone(), ..RequestMeta::default() },
            image: s.image.data().to_vec(),
        });
        let Message::PredictResp(r) = server.handle(m) else { panic!() };
        // confirmed when the verdict matches the label we want stored
        let want = if truthful { s.class } else { s.class.other() };
        let c = Confirmation { scan_id: id, confirmed: r.verdict == want, verdict: r.verdict };
        assert!(matches!(server.handle(Message::ConfirmReq(c)), Message::Ack { .. }));
    }
}

fn retrain_server(root: &std::path::Path, threshold: usize) -> Arc<Server> {
    let mut cfg = server_config(root);
    cfg.policy.threshold = threshold;
    cfg.retrain.learning_rate = 0.01;
    cfg.retrain.epochs = 8;
    cfg.retrain.batch_size = 16;
    Arc::new(Server::open(cfg, Some(disc_dataset(40, 77))).unwrap())
}

#[test]
fn better_candidate_replaces_worse_is_retained() {
    let dir = tempfile::tempdir().unwrap();
    let server = retrain_server(dir.path(), 30);
    server.publish(&seal(&tiny_network(3), 1)).unwrap();

    labeled_batch(&server, 20, 5, true);
    assert_eq!(server.retrain_and_maybe_replace().unwrap(), RetrainReport::BelowThreshold { batch: 20, threshold: 30 });
    labeled_batch(&server, 20, 6, true);

    let held = examples(server.held_out());
    let metric = PolicyMetric::FBeta { beta: 2.0 };
    let before = metric.score(&measure(&server.active().unwrap().network, &held).unwrap());
    let r = server.retrain_and_maybe_replace().unwrap();
    let RetrainReport::Replaced { batch: 40, from: 1, to: 2, active_score, candidate_score } = r else { panic!("{r:?}") };
    assert_eq!(active_score, before);
    assert!(candidate_score > active_score);
    let active = server.active().unwrap();
    assert_eq!(active.version, 2);
    assert_eq!(active.artifact.parent(), Some(server.registry().entry(1).unwrap().model));
    assert_eq!(metric.score(&active.artifact.metrics()), candidate_score, "stored metrics are the held-out ones");
    assert!(server.store().update_batch().is_empty());
    assert_eq!(server.store().used_batch().len(), 40);

    // a batch of wrong labels must not displace the better model
    labeled_batch(&server, 30, 8, false);
    let r = server.retrain_and_maybe_replace().unwrap();
    let RetrainReport::Retained { version: 2, active_score, candidate_score, .. } = r else { panic!("{r:?}") };
    assert!(candidate_score <= active_score);
    assert_eq!(server.active().unwrap().version, 2);
    let after = metric.score(&measure(&server.active().unwrap().network, &held).unwrap());
    assert!(after >= before, "held-out score never decreases");
}

#[test]
fn concurrent_retrains_are_serialized() {
    let dir = tempfile::tempdir().unwrap();
    let server = retrain_server(dir.path(), 10);
    server.publish(&seal(&tiny_network(3), 1)).unwrap();
    labeled_batch(&server, 24, 9, true);
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let s = server.clone();
            thread::spawn(move || s.retrain_and_maybe_replace().unwrap())
        })
        .collect();
    let mut reports: Vec<RetrainReport> = runs.into_iter().map(|h| h.join().unwrap()).collect();
    reports.sort_by_key(|r| matches!(r, RetrainReport::BelowThreshold { .. }));
    assert!(matches!(reports[0], RetrainReport::Replaced { batch: 24, .. } | RetrainReport::Retained { batch: 24, .. }), "{reports:?}");
    assert_eq!(reports[1], RetrainReport::BelowThreshold { batch: 0, threshold: 10 });
}

#[test]
fn divergence_keeps_the_active_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = server_config(dir.path());
    cfg.policy.threshold = 4;
    cfg.retrain.learning_rate = f64::MAX;
    cfg.retrain.optimizer = cxr_core::nn::OptimizerKind::Sgd;
    let server = Server::open(cfg, Some(disc_dataset(10, 77))).unwrap();
    server.publish(&seal(&tiny_network(3), 1)).unwrap();
    labeled_batch(&server, 8, 2, true);
    let r = server.retrain_and_maybe_replace().unwrap();
    assert!(matches!(r, RetrainReport::Diverged { batch: 8, version: 1, .. }), "{r:?}");
    assert_eq!(server.active().unwrap().version, 1);
    assert!(server.store().update_batch().is_empty(), "batch is marked used either way");
}

#[test]
fn retrain_needs_a_held_out_set() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = server_config(dir.path());
    cfg.policy.threshold = 1;
    let server = Server::open(cfg, None).unwrap();
    server.publish(&seal(&tiny_network(3), 1)).unwrap();
    labeled_batch(&server, 2, 1, true);
    assert!(matches!(server.retrain_and_maybe_replace(), Err(ServerError::NoHeldOut)));
}

#[test]
fn held_out_set_is_frozen_across_restarts() {
    let dir = tempfile::tempdir().unwrap();
    let set = disc_dataset(12, 3);
    let first = open_server(dir.path(), Some(set.clone()));
    assert_eq!(first.held_out().len(), 12);
    drop(first);
    let again = open_server(dir.path(), None);
    // reloaded ids carry their class folder as a prefix
    let strip = |id: &str| id.split_once('-').map(|(_, rest)| rest.to_string()).unwrap();
    let mut ids: Vec<_> = again.held_out().iter().map(|s| (strip(s.id.as_str()), s.class, s.image.clone())).collect();
    let mut want: Vec<_> = set.iter().map(|s| (s.id.to_string(), s.class, s.image.clone())).collect();
    ids.sort_by(|a, b| a.0.cmp(&b.0));
    want.sort_by(|a, b| a.0.cmp(&b.0));
    assert_eq!(ids.len(), want.len());
    for (a, b) in ids.iter().zip(&want) {
        assert_eq!((&a.0, a.1, &a.2), (&b.0, b.1, &b.2));
    }
    // a different set later is ignored in favour of the frozen one
    let third = open_server(dir.path(), Some(disc_dataset(3, 4)));
    assert_eq!(third.held_out().len(), 12);
}

#[test]
fn export_contains_exactly_the_public_records() {
    let dir = tempfile::tempdir().unwrap();
    let server = open_server(&dir.path().join("srv"), None);
    server.publish(&seal(&tiny_network(1), 1)).unwrap();
    let out = dir.path().join("empty");
    assert_eq!(server.export_public(&out).unwrap(), 0);
    assert_eq!(std::fs::read_to_string(out.join("manifest.tsv")).unwrap().lines().count(), 1);

    for i in 0..5 {
        predict(&server, &format!("p-{i:06}"), Class::Normal, i);
    }
    let public: Vec<ScanId> = (0..3).map(|i| ScanId::new(format!("pub-{i:06}")).unwrap()).collect();
    for (i, id) in public.iter().enumerate() {
        let rec = ScanRecord::new(id.clone(), scan_image(Class::Pneumonia, 100 + i as u64), Label::Unlabeled, Section::Public);
        server.store().ingest(rec).unwrap();
    }
    let out = dir.path().join("export");
    assert_eq!(server.export_public(&out).unwrap(), 3);
    let mut files: Vec<String> =
        std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    files.sort();
    assert_eq!(files, ["manifest.tsv", "pub-000000.pgm", "pub-000001.pgm", "pub-000002.pgm"]);
    for id in &public {
        let exported = std::fs::read(out.join(format!("{id}.pgm"))).unwrap();
        assert_eq!(Digest::of(&exported), Digest::of(&server.store().pgm_bytes(id).unwrap()));
    }
    let manifest = std::fs::read_to_string(out.join("manifest.tsv")).unwrap();
    assert!(!manifest.contains("p-0000"));
}

#[test]
fn registry_keeps_every_version_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let server = open_server(dir.path(), None);
    let a = seal(&tiny_network(1), 1);
    let b = seal(&tiny_network(2), 1);
    assert_eq!(server.publish(&a).unwrap().version, 1);
    // a taken version number is resealed to the next free one
    let rb = server.publish(&b).unwrap();
    assert_eq!(rb.version, 2);
    assert_eq!(server.publish(&a).unwrap().version, 1, "republishing a known model reactivates it");
    server.activate(2).unwrap();
    assert_eq!(server.rollback().unwrap().version, 1);
    assert_eq!(server.registry().activations(), &[1, 2, 1, 2, 1]);

    let entries = server.registry().entries().to_vec();
    for e in &entries {
        let (art, cm) = server.registry().load(e.version).unwrap();
        assert_eq!(art.digest(), e.model);
        assert_eq!(cm.digest(), e.compressed);
    }
    drop(server);

    let reopened = open_server(dir.path(), None);
    assert_eq!(reopened.active().unwrap().version, 1);
    let entry = *reopened.registry().entry(2).unwrap();
    let path = dir.path().join("registry").join("models").join(format!("{}.cxrm", entry.model));
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(reopened.activate(2), Err(ServerError::Tampered(_))));
    assert_eq!(reopened.active().unwrap().version, 1, "a tampered version never becomes active");
}

//! `train`, `compress` and `heatmap`.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use cxr_core::compress::{compress_model, decompress_model, CompressedModel, CompressionConfig, COMPRESSED_MAGIC};
use cxr_core::dataset::{
    check_disjoint, expand_with_augmentation, load_labeled_dir, rebalance, split, LabeledSet, Sample, SplitSpec,
    SCAN_SIDE,
};
use cxr_core::imaging::{self, AugmentConfig, PreprocessConfig};
use cxr_core::metrics::{confusion, report, roc_auc, Class};
use cxr_core::nn::{evaluate, measure, train as fit, Example, LayerSpec, ModelArtifact, Network, OptimizerKind, TrainConfig};
use cxr_core::par::Exec;
use cxr_core::saliency::occlusion_heatmap;
use cxr_core::synthetic::disc_dataset;
use cxr_core::{Digest, GrayImage};
use serde_json::json;

use crate::args::{Arch, CompressArgs, HeatmapArgs, Optimizer, TrainArgs};
use crate::{emit_json, input, sibling, Cli, CliError, Result};

/// A model read from disk, with the digest new training should name as its
/// parent.
pub struct Loaded {
    pub artifact: ModelArtifact,
    /// For a compressed file this is the artifact that was compressed.
    pub lineage: Digest,
}

pub fn load_model(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(input(path)?)?;
    if bytes.starts_with(COMPRESSED_MAGIC) {
        let cm = CompressedModel::from_bytes(&bytes).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
        let artifact = decompress_model(&cm).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
        Ok(Loaded { artifact, lineage: cm.original_digest() })
    } else {
        let artifact = ModelArtifact::from_bytes(&bytes).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
        let lineage = artifact.digest();
        Ok(Loaded { artifact, lineage })
    }
}

pub fn small_network(seed: u64) -> Network {
    use LayerSpec::*;
    Network::new(vec![SCAN_SIDE, SCAN_SIDE, 1], vec![MaxPool2d { size: 8 }, Flatten, Dense { units: 2 }, Softmax], seed)
        .expect("small architecture is consistent")
}

fn samples(a: &TrainArgs, seed: u64) -> Result<Vec<Sample>> {
    if let Some(n) = a.synthetic {
        if n < 4 {
            return Err(CliError::Usage("--synthetic needs at least 4 scans".into()));
        }
        return Ok(disc_dataset(n, seed));
    }
    let dir = a.data.as_deref().expect("clap requires --data or --synthetic");
    let mut s = load_labeled_dir(input(dir)?, SCAN_SIDE).map_err(CliError::failed)?;
    if s.is_empty() {
        return Err(CliError::Failed(format!("no labeled scans under {}", dir.display())));
    }
    if !a.no_preprocess {
        let cfg = PreprocessConfig::default();
        for x in &mut s {
            x.image = imaging::preprocess(&x.image, &cfg).map_err(CliError::failed)?;
        }
    }
    Ok(s)
}

fn history_csv(h: &[cxr_core::nn::EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_accuracy\n");
    for r in h {
        let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.val_accuracy);
    }
    out
}

pub(crate) fn train(cli: &Cli, a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let all = samples(a, cli.seed)?;
    let (train_set, test_set) =
        split(&all, SplitSpec { test_fraction: a.test_fraction, seed: cli.seed }).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut train_set: LabeledSet = train_set;
    if let Some(ratio) = a.rebalance {
        train_set = rebalance(&train_set, ratio, cli.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if a.augment > 0 {
        let cfg = AugmentConfig { seed: cli.seed, ..AugmentConfig::default() };
        train_set = expand_with_augmentation(&train_set, &cfg, a.augment).map_err(CliError::failed)?;
    }
    check_disjoint(&train_set, &test_set).map_err(CliError::failed)?;

    let (network, version, parent) = match &a.resume {
        Some(p) => {
            let l = load_model(p)?;
            let v = a.model_version.unwrap_or(l.artifact.version() + 1);
            (l.artifact.to_network(), v, Some(l.lineage))
        }
        None => {
            let net = match a.arch {
                Arch::Reference => Network::reference(cli.seed),
                Arch::Small => small_network(cli.seed),
            };
            (net, a.model_version.unwrap_or(1), None)
        }
    };
    if network.input_shape() != [SCAN_SIDE, SCAN_SIDE, 1] {
        return Err(CliError::Failed(format!("model input {:?} does not take 128x128 scans", network.input_shape())));
    }
    let cfg = TrainConfig {
        epochs: a.epochs,
        patience: a.patience.unwrap_or(a.epochs),
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        optimizer: match a.optimizer {
            Optimizer::Adam => OptimizerKind::Adam,
            Optimizer::Sgd => OptimizerKind::Sgd,
        },
        seed: cli.seed,
        target_val_accuracy: a.target_accuracy,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let tr: Vec<Example> = train_set.to_examples();
    let te: Vec<Example> = test_set.to_examples();
    let outcome = fit(network, &tr, &te, &cfg).map_err(CliError::failed)?;

    let eval = evaluate(&outcome.network, &te, Exec::default()).map_err(CliError::failed)?;
    let labels: Vec<Class> = te.iter().map(|e| Class::from_index(e.label).expect("binary labels")).collect();
    let preds: Vec<Class> = eval.predictions().into_iter().map(|p| Class::from_index(p).expect("binary output")).collect();
    let rep = report(&confusion(&labels, &preds).map_err(CliError::failed)?).map_err(CliError::failed)?;
    let scores: Vec<f64> = eval.probabilities.iter().map(|p| p[Class::Pneumonia.index()]).collect();
    let auc = roc_auc(&scores, &labels).ok();
    let metrics = measure(&outcome.network, &te).map_err(CliError::failed)?;
    let artifact = ModelArtifact::seal(&outcome.network, version, parent, metrics);

    artifact.write(&a.out).map_err(CliError::failed)?;
    let report_path = sibling(&a.out, ".report.json");
    let history_path = sibling(&a.out, ".history.csv");
    let summary = json!({
        "artifact": a.out,
        "version": version,
        "digest": artifact.digest().to_hex(),
        "parent": parent.map(|d| d.to_hex()),
        "params": outcome.network.param_count(),
        "train_size": tr.len(),
        "test_size": te.len(),
        "epochs_run": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "stopped_early": outcome.stopped_early,
        "metrics": metrics,
        "report": rep,
        "auc": auc,
    });
    std::fs::write(&report_path, serde_json::to_string_pretty(&summary).map_err(CliError::failed)? + "\n")?;
    std::fs::write(&history_path, history_csv(&outcome.history))?;

    if cli.json {
        return emit_json(out, &summary);
    }
    writeln!(out, "model v{version} {} ({} params)", artifact.digest().short(), outcome.network.param_count())?;
    if let Some(p) = parent {
        writeln!(out, "parent {}", p.short())?;
    }
    writeln!(
        out,
        "trained {} epochs on {} scans, best epoch {}, validated on {}",
        outcome.history.len(),
        tr.len(),
        outcome.best_epoch,
        te.len()
    )?;
    write!(out, "\n{}", rep.render_table())?;
    if let Some(auc) = auc {
        writeln!(out, "\nAUC {auc:.4}")?;
    }
    writeln!(out, "\nwrote {}, {}, {}", a.out.display(), report_path.display(), history_path.display())?;
    Ok(())
}

fn accuracy(net: &Network, ex: &[Example]) -> Result<(f64, Vec<usize>)> {
    let e = evaluate(net, ex, Exec::default()).map_err(CliError::failed)?;
    let p = e.predictions();
    Ok((e.accuracy, p))
}

pub(crate) fn compress(cli: &Cli, a: &CompressArgs, out: &mut dyn Write) -> Result<()> {
    let bytes = std::fs::read(input(&a.model)?)?;
    let art = ModelArtifact::from_bytes(&bytes).map_err(|e| CliError::Failed(format!("{}: {e}", a.model.display())))?;
    let cfg = if a.passthrough {
        CompressionConfig::passthrough()
    } else {
        CompressionConfig {
            sparsity: a.sparsity,
            conv_sparsity: a.conv_sparsity,
            dense_bits: Some(a.dense_bits),
            conv_bits: Some(a.conv_bits),
        }
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let cm = compress_model(&art, &cfg).map_err(CliError::failed)?;
    let dest = a.out.clone().unwrap_or_else(|| a.model.with_extension("cxrc"));
    cm.write(&dest).map_err(CliError::failed)?;

    let eval = match a.eval_synthetic {
        Some(n) => {
            let ex: Vec<Example> = disc_dataset(n, cli.seed).iter().map(Sample::to_example).collect();
            let restored = decompress_model(&cm).map_err(CliError::failed)?.to_network();
            let (before, p0) = accuracy(&art.to_network(), &ex)?;
            let (after, p1) = accuracy(&restored, &ex)?;
            let agree = p0.iter().zip(&p1).filter(|(x, y)| x == y).count() as f64 / ex.len().max(1) as f64;
            Some((before, after, agree))
        }
        None => None,
    };

    if cli.json {
        let layers: Vec<_> = cm
            .reports()
            .iter()
            .map(|r| {
                json!({"tensor": r.tensor, "shape": r.shape, "original_bytes": r.original_bytes,
                       "compressed_bytes": r.compressed_bytes, "sparsity": r.sparsity,
                       "codebook_len": r.codebook_len, "mse": r.mse})
            })
            .collect();
        return emit_json(
            out,
            &json!({
                "output": dest,
                "original_bytes": cm.original_size(),
                "compressed_bytes": cm.compressed_size(),
                "ratio": cm.ratio(),
                "digest": cm.digest().to_hex(),
                "original_digest": cm.original_digest().to_hex(),
                "layers": layers,
                "eval": eval.map(|(b, a, g)| json!({"accuracy_before": b, "accuracy_after": a, "agreement": g})),
            }),
        );
    }
    writeln!(out, "{:>6} {:>16} {:>12} {:>12} {:>9} {:>9}", "tensor", "shape", "original", "compressed", "sparsity", "codebook")?;
    for r in cm.reports() {
        let shape = r.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        writeln!(
            out,
            "{:>6} {:>16} {:>12} {:>12} {:>8.1}% {:>9}",
            r.tensor,
            shape,
            r.original_bytes,
            r.compressed_bytes,
            r.sparsity * 100.0,
            r.codebook_len
        )?;
    }
    writeln!(out, "\n{} -> {} bytes, ratio {:.2}x", cm.original_size(), cm.compressed_size(), cm.ratio())?;
    if let Some((b, a, g)) = eval {
        writeln!(out, "synthetic accuracy {:.2}% -> {:.2}%, argmax agreement {:.2}%", b * 100.0, a * 100.0, g * 100.0)?;
    }
    writeln!(out, "wrote {} ({})", dest.display(), cm.digest().short())?;
    Ok(())
}

pub(crate) fn heatmap(cli: &Cli, a: &HeatmapArgs, out: &mut dyn Write) -> Result<()> {
    let net = load_model(&a.model)?.artifact.to_network();
    let raw = GrayImage::read_pgm(input(&a.image)?).map_err(|e| CliError::Failed(format!("{}: {e}", a.image.display())))?;
    let img = if a.no_preprocess {
        if raw.width() != SCAN_SIDE || raw.height() != SCAN_SIDE {
            return Err(CliError::Usage(format!("--no-preprocess needs a {SCAN_SIDE}x{SCAN_SIDE} image")));
        }
        raw
    } else {
        imaging::preprocess(&raw, &PreprocessConfig::default()).map_err(CliError::failed)?
    };
    let probs = net.predict_one(&imaging::normalize(&img)).map_err(CliError::failed)?;
    let predicted = if probs[1] >= probs[0] { Class::Pneumonia } else { Class::Normal };
    let target = match &a.class {
        Some(c) => c.parse::<Class>().map_err(CliError::Usage)?,
        None => predicted,
    };
    let heat = occlusion_heatmap(&net, &img, target, a.patch, a.stride).map_err(|e| CliError::Usage(e.to_string()))?;
    let overlay = heat.overlay(&img).map_err(CliError::failed)?;
    overlay.write_pgm(&a.out).map_err(CliError::failed)?;
    let hottest = heat.values().iter().cloned().fold(0.0, f64::max);
    if cli.json {
        return emit_json(
            out,
            &json!({"output": a.out, "probability": probs[1], "predicted": predicted, "target": target,
                    "degenerate": heat.is_degenerate(), "max": hottest}),
        );
    }
    writeln!(out, "p(pneumonia)={:.4} predicted={predicted} explained={target}", probs[1])?;
    if heat.is_degenerate() {
        writeln!(out, "no occlusion changed the score; the map is flat")?;
    }
    writeln!(out, "wrote {}", a.out.display())?;
    Ok(())
}

//! `report`: classification report and AUC from scored predictions.

use std::io::Write;

use cxr_core::metrics::{confusion, report, roc_auc, Class};
use serde_json::json;

use crate::args::ReportArgs;
use crate::{emit_json, input, Cli, CliError, Result};

/// Parse `label score` lines; blank lines and `#` comments are skipped.
pub fn parse_predictions(text: &str) -> Result<(Vec<Class>, Vec<f64>)> {
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| CliError::Failed(format!("line {}: {msg}", i + 1));
        let fields: Vec<&str> = line.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()).collect();
        let [label, score] = fields[..] else {
            return Err(bad(format!("expected \"label score\", got {line:?}")));
        };
        let label: Class = label.parse().map_err(bad)?;
        let score: f64 = score.parse().map_err(|_| bad(format!("bad score {score:?}")))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(bad(format!("score {score} outside [0, 1]")));
        }
        labels.push(label);
        scores.push(score);
    }
    if labels.is_empty() {
        return Err(CliError::Failed("no predictions".into()));
    }
    Ok((labels, scores))
}

pub(crate) fn run(cli: &Cli, a: &ReportArgs, out: &mut dyn Write) -> Result<()> {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(CliError::Usage(format!("--threshold must be in [0, 1], got {}", a.threshold)));
    }
    let text = std::fs::read_to_string(input(&a.predictions)?)?;
    let (labels, scores) = parse_predictions(&text)?;
    let preds: Vec<Class> =
        scores.iter().map(|&s| if s >= a.threshold { Class::Pneumonia } else { Class::Normal }).collect();
    let cm = confusion(&labels, &preds).map_err(CliError::failed)?;
    let rep = report(&cm).map_err(CliError::failed)?;
    // undefined when only one class is present
    let auc = roc_auc(&scores, &labels).ok();
    if cli.json {
        return emit_json(
            out,
            &json!({"threshold": a.threshold, "n": labels.len(), "confusion": cm.counts, "report": rep, "auc": auc}),
        );
    }
    write!(out, "{}", rep.render_table())?;
    match auc {
        Some(v) => writeln!(out, "\nAUC {v:.4}")?,
        None => writeln!(out, "\nAUC undefined (one class only)")?,
    }
    Ok(())
}

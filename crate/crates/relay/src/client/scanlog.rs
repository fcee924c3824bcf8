//! Append-only log of scans this client evaluated.
//!
//! Lines: `reserve <id>`, `scan <id> <source> <p> <verdict> <version> <ms>`,
//! `rescore <id> <p> <verdict> <version>` and `confirm <id> <0|1>`. An id is
//! reserved durably before its request leaves the machine, so ids are never
//! reused across restarts.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use cxr_core::metrics::Class;
use serde::Serialize;

use super::{ScanResult, Source};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanEntry {
    pub scan_id: String,
    pub source: Source,
    pub probability: f64,
    pub verdict: Class,
    pub model_version: u64,
    pub timestamp_ms: u64,
    pub server_probability: Option<f64>,
    pub server_verdict: Option<Class>,
    pub server_version: Option<u64>,
    pub confirmed: Option<bool>,
}

impl ScanEntry {
    pub fn new(r: &ScanResult, timestamp_ms: u64) -> Self {
        Self {
            scan_id: r.scan_id.clone(),
            source: r.source,
            probability: r.probability,
            verdict: r.verdict,
            model_version: r.model_version,
            timestamp_ms,
            server_probability: None,
            server_verdict: None,
            server_version: None,
            confirmed: None,
        }
    }

    /// The server's later score disagrees with the verdict shown.
    pub fn disagreement(&self) -> bool {
        self.server_verdict.is_some_and(|v| v != self.verdict)
    }
}

#[derive(Debug)]
pub struct ScanLog {
    file: File,
    reserved: usize,
    order: Vec<String>,
    entries: HashMap<String, ScanEntry>,
}

fn bad(line: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, format!("malformed scan log line {line:?}"))
}

fn class(s: &str) -> Option<Class> {
    s.parse().ok()
}

impl ScanLog {
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref();
        let mut log = Self {
            file: OpenOptions::new().create(true).append(true).open(path)?,
            reserved: 0,
            order: Vec::new(),
            entries: HashMap::new(),
        };
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                ["reserve", _] => log.reserved += 1,
                ["scan", id, src, p, v, ver, ms] => {
                    let e = ScanEntry {
                        scan_id: id.to_string(),
                        source: Source::parse(src).ok_or_else(|| bad(&line))?,
                        probability: p.parse().map_err(|_| bad(&line))?,
                        verdict: class(v).ok_or_else(|| bad(&line))?,
                        model_version: ver.parse().map_err(|_| bad(&line))?,
                        timestamp_ms: ms.parse().map_err(|_| bad(&line))?,
                        server_probability: None,
                        server_verdict: None,
                        server_version: None,
                        confirmed: None,
                    };
                    log.insert(e);
                }
                ["rescore", id, p, v, ver] => {
                    if let Some(e) = log.entries.get_mut(*id) {
                        e.server_probability = Some(p.parse().map_err(|_| bad(&line))?);
                        e.server_verdict = Some(class(v).ok_or_else(|| bad(&line))?);
                        e.server_version = Some(ver.parse().map_err(|_| bad(&line))?);
                    }
                }
                ["confirm", id, c] => {
                    if let Some(e) = log.entries.get_mut(*id) {
                        e.confirmed = Some(*c == "1");
                    }
                }
                [] => {}
                // a torn final line from a crash is ignored
                _ => log::warn!("skipping scan log line {line:?}"),
            }
        }
        Ok(log)
    }

    fn insert(&mut self, e: ScanEntry) {
        if !self.entries.contains_key(&e.scan_id) {
            self.order.push(e.scan_id.clone());
        }
        self.entries.insert(e.scan_id.clone(), e);
    }

    fn append(&mut self, line: String) -> io::Result<()> {
        writeln!(self.file, "{line}")?;
        self.file.sync_data()
    }

    /// Ids handed out so far, including scans that never completed.
    pub fn len(&self) -> usize {
        self.reserved
    }

    pub fn is_empty(&self) -> bool {
        self.reserved == 0
    }

    pub fn reserve(&mut self, id: &str) -> io::Result<()> {
        self.append(format!("reserve {id}"))?;
        self.reserved += 1;
        Ok(())
    }

    pub fn record(&mut self, e: ScanEntry) -> io::Result<()> {
        self.append(format!(
            "scan {} {} {} {} {} {}",
            e.scan_id,
            e.source.as_str(),
            e.probability,
            e.verdict,
            e.model_version,
            e.timestamp_ms
        ))?;
        self.insert(e);
        Ok(())
    }

    pub fn rescore(&mut self, id: &str, p: f64, verdict: Class, version: u64) -> io::Result<()> {
        self.append(format!("rescore {id} {p} {verdict} {version}"))?;
        if let Some(e) = self.entries.get_mut(id) {
            e.server_probability = Some(p);
            e.server_verdict = Some(verdict);
            e.server_version = Some(version);
        }
        Ok(())
    }

    pub fn confirm(&mut self, id: &str, confirmed: bool) -> io::Result<()> {
        self.append(format!("confirm {id} {}", confirmed as u8))?;
        if let Some(e) = self.entries.get_mut(id) {
            e.confirmed = Some(confirmed);
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&ScanEntry> {
        self.entries.get(id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &ScanEntry> {
        self.order.iter().map(|id| &self.entries[id])
    }

    pub fn disagreements(&self) -> usize {
        self.entries.values().filter(|e| e.disagreement()).count()
    }
}

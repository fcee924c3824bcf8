//! Content-addressed model registry.
//!
//! Artifacts live under `models/<digest>.cxrm` (full) and
//! `models/<digest>.cxrc` (compressed); `index.log` is an append-only list
//! of `register <version> <model digest> <compressed digest>` and
//! `activate <version>` lines.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use cxr_core::compress::CompressedModel;
use cxr_core::nn::ModelArtifact;
use cxr_core::Digest;

use super::ServerError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegistryEntry {
    pub version: u64,
    pub model: Digest,
    pub compressed: Digest,
}

#[derive(Debug)]
pub struct ModelRegistry {
    root: PathBuf,
    entries: Vec<RegistryEntry>,
    /// Every activation in order; the last one is current.
    activations: Vec<u64>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

impl ModelRegistry {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, ServerError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("models"))?;
        let mut reg = Self { root, entries: Vec::new(), activations: Vec::new() };
        let index = reg.index_path();
        if index.exists() {
            for (n, line) in BufReader::new(File::open(&index)?).lines().enumerate() {
                let line = line?;
                let bad = || ServerError::Registry(format!("index.log line {}: {line:?}", n + 1));
                let f: Vec<&str> = line.split_whitespace().collect();
                match f.as_slice() {
                    ["register", v, m, c] => reg.entries.push(RegistryEntry {
                        version: v.parse().map_err(|_| bad())?,
                        model: m.parse().map_err(|_| bad())?,
                        compressed: c.parse().map_err(|_| bad())?,
                    }),
                    ["activate", v] => reg.activations.push(v.parse().map_err(|_| bad())?),
                    [] => {}
                    _ => return Err(bad()),
                }
            }
        }
        Ok(reg)
    }

    fn index_path(&self) -> PathBuf {
        self.root.join("index.log")
    }

    fn model_path(&self, d: &Digest) -> PathBuf {
        self.root.join("models").join(format!("{d}.cxrm"))
    }

    fn compressed_path(&self, d: &Digest) -> PathBuf {
        self.root.join("models").join(format!("{d}.cxrc"))
    }

    fn append(&self, line: &str) -> Result<(), ServerError> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.index_path())?;
        writeln!(f, "{line}")?;
        f.sync_all()?;
        Ok(())
    }

    pub fn entries(&self) -> &[RegistryEntry] {
        &self.entries
    }

    pub fn activations(&self) -> &[u64] {
        &self.activations
    }

    pub fn entry(&self, version: u64) -> Option<&RegistryEntry> {
        self.entries.iter().find(|e| e.version == version)
    }

    pub fn by_model(&self, digest: &Digest) -> Option<&RegistryEntry> {
        self.entries.iter().find(|e| e.model == *digest)
    }

    pub fn active(&self) -> Option<&RegistryEntry> {
        self.activations.last().and_then(|&v| self.entry(v))
    }

    pub fn next_version(&self) -> u64 {
        self.entries.iter().map(|e| e.version).max().map_or(1, |v| v + 1)
    }

    /// Store both files, then index them. The compressed model must have
    /// been built from this exact artifact.
    pub fn register(&mut self, art: &ModelArtifact, cm: &CompressedModel) -> Result<RegistryEntry, ServerError> {
        if cm.original_digest() != art.digest() {
            return Err(ServerError::Registry("compressed model was built from a different artifact".into()));
        }
        if let Some(e) = self.entry(art.version()) {
            if e.model == art.digest() {
                return Ok(*e);
            }
            return Err(ServerError::Registry(format!("version {} is already registered", art.version())));
        }
        let entry = RegistryEntry { version: art.version(), model: art.digest(), compressed: cm.digest() };
        write_atomic(&self.model_path(&entry.model), &art.to_bytes())?;
        write_atomic(&self.compressed_path(&entry.compressed), cm.as_bytes())?;
        self.append(&format!("register {} {} {}", entry.version, entry.model, entry.compressed))?;
        self.entries.push(entry);
        Ok(entry)
    }

    pub fn activate(&mut self, version: u64) -> Result<RegistryEntry, ServerError> {
        let e = *self.entry(version).ok_or_else(|| ServerError::Registry(format!("no version {version}")))?;
        // both files must load and verify before clients can be pointed at them
        self.load(version)?;
        self.append(&format!("activate {version}"))?;
        self.activations.push(version);
        Ok(e)
    }

    /// Re-activate the version that was active before the current one.
    pub fn rollback(&mut self) -> Result<RegistryEntry, ServerError> {
        let cur = *self.activations.last().ok_or_else(|| ServerError::Registry("nothing is active".into()))?;
        let prev = self
            .activations
            .iter()
            .rev()
            .copied()
            .find(|&v| v != cur)
            .ok_or_else(|| ServerError::Registry("no earlier version to roll back to".into()))?;
        self.activate(prev)
    }

    /// Both files for `version`, digest-checked against the index.
    pub fn load(&self, version: u64) -> Result<(ModelArtifact, CompressedModel), ServerError> {
        let e = self.entry(version).ok_or_else(|| ServerError::Registry(format!("no version {version}")))?;
        let tampered = |what: &str, why: String| ServerError::Tampered(format!("{what} file for v{version}: {why}"));
        let art = ModelArtifact::from_bytes(&fs::read(self.model_path(&e.model))?).map_err(|x| tampered("model", x.to_string()))?;
        if art.digest() != e.model {
            return Err(ServerError::Tampered(format!("model file for v{version}")));
        }
        let cm = CompressedModel::from_bytes(&fs::read(self.compressed_path(&e.compressed))?)
            .map_err(|x| tampered("compressed", x.to_string()))?;
        if cm.digest() != e.compressed || cm.original_digest() != e.model {
            return Err(ServerError::Tampered(format!("compressed file for v{version}")));
        }
        Ok((art, cm))
    }
}

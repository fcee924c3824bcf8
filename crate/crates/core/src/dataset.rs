//! Scan records, stratified splitting, class rebalancing, augmentation
//! expansion and the on-disk scan store.
//!
//! Training-side operations work on [`LabeledSet`]s that remember whether
//! they are a train or a test partition; resampling or augmenting a test
//! partition is refused so that no test observation can leak into training.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{self, AugmentConfig, GrayImage, ImagingError};
use crate::metrics::Class;
use crate::nn::Example;
use crate::par::Exec;

/// Side length of a preprocessed scan.
pub const SCAN_SIDE: usize = 128;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("stratified split needs at least one record of each class")]
    Stratification,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("refusing to {0} a test partition")]
    LeakageGuard(&'static str),
    #[error("leakage: {0} appears in both train and test")]
    Leakage(ScanId),
    #[error("duplicate scan id {0}")]
    DuplicateId(ScanId),
    #[error("invalid scan id {0:?}")]
    InvalidId(String),
    #[error("unknown scan id {0}")]
    NotFound(ScanId),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("corrupt store entry {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Scan identifier; restricted to characters safe in file names.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScanId(String);

impl ScanId {
    pub fn new(s: impl Into<String>) -> Result<Self> {
        let s = s.into();
        let ok = !s.is_empty()
            && s.len() <= 128
            && s.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.' | b'~'))
            && !s.starts_with('.');
        if ok {
            Ok(ScanId(s))
        } else {
            Err(DatasetError::InvalidId(s))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ScanId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Pneumonia,
    Unlabeled,
}

impl Label {
    pub fn class(self) -> Option<Class> {
        match self {
            Label::Normal => Some(Class::Normal),
            Label::Pneumonia => Some(Class::Pneumonia),
            Label::Unlabeled => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Pneumonia => "pneumonia",
            Label::Unlabeled => "unlabeled",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "normal" => Some(Label::Normal),
            "pneumonia" => Some(Label::Pneumonia),
            "unlabeled" => Some(Label::Unlabeled),
            _ => None,
        }
    }
}

impl From<Class> for Label {
    fn from(c: Class) -> Self {
        match c {
            Class::Normal => Label::Normal,
            Class::Pneumonia => Label::Pneumonia,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Section {
    Public,
    Private,
}

impl Section {
    pub fn as_str(self) -> &'static str {
        match self {
            Section::Public => "public",
            Section::Private => "private",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "public" => Some(Section::Public),
            "private" => Some(Section::Private),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Batch {
    Used,
    Update,
}

impl Batch {
    fn as_str(self) -> &'static str {
        match self {
            Batch::Used => "used",
            Batch::Update => "update",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiversityMeta {
    pub hospital: Option<String>,
    pub geography: Option<String>,
    pub age: Option<u32>,
    pub sex: Option<String>,
    pub scanner_brand: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanRecord {
    pub id: ScanId,
    pub image: GrayImage,
    pub label: Label,
    pub confirmed: bool,
    pub section: Section,
    pub batch: Batch,
    pub diversity: DiversityMeta,
}

impl ScanRecord {
    pub fn new(id: ScanId, image: GrayImage, label: Label, section: Section) -> Self {
        Self { id, image, label, confirmed: false, section, batch: Batch::Update, diversity: DiversityMeta::default() }
    }

    fn sidecar(&self) -> String {
        let mut s = format!(
            "id={}\nlabel={}\nconfirmed={}\nsection={}\nbatch={}\n",
            self.id,
            self.label.as_str(),
            self.confirmed,
            self.section.as_str(),
            self.batch.as_str()
        );
        let d = &self.diversity;
        let fields = [
            ("hospital", d.hospital.clone()),
            ("geography", d.geography.clone()),
            ("age", d.age.map(|a| a.to_string())),
            ("sex", d.sex.clone()),
            ("scanner_brand", d.scanner_brand.clone()),
        ];
        for (k, v) in fields {
            if let Some(v) = v {
                s.push_str(&format!("{k}={}\n", v.replace('\n', " ")));
            }
        }
        s
    }

    fn apply_sidecar(&mut self, text: &str) -> std::result::Result<(), String> {
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| format!("bad line {line:?}"))?;
            match k {
                "id" => {}
                "label" => self.label = Label::parse(v).ok_or_else(|| format!("bad label {v:?}"))?,
                "confirmed" => self.confirmed = v.parse().map_err(|_| format!("bad flag {v:?}"))?,
                "section" => self.section = Section::parse(v).ok_or_else(|| format!("bad section {v:?}"))?,
                "batch" => {
                    self.batch = match v {
                        "used" => Batch::Used,
                        "update" => Batch::Update,
                        _ => return Err(format!("bad batch {v:?}")),
                    }
                }
                "hospital" => self.diversity.hospital = Some(v.to_string()),
                "geography" => self.diversity.geography = Some(v.to_string()),
                "age" => self.diversity.age = Some(v.parse().map_err(|_| format!("bad age {v:?}"))?),
                "sex" => self.diversity.sex = Some(v.to_string()),
                "scanner_brand" => self.diversity.scanner_brand = Some(v.to_string()),
                other => return Err(format!("unknown key {other:?}")),
            }
        }
        Ok(())
    }
}

/// One labeled training/test observation. Augmented copies keep the id of
/// the record they were derived from in `source`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: ScanId,
    pub source: ScanId,
    pub image: GrayImage,
    pub class: Class,
}

impl Sample {
    pub fn new(id: ScanId, image: GrayImage, class: Class) -> Self {
        Self { source: id.clone(), id, image, class }
    }

    pub fn from_record(r: &ScanRecord) -> Option<Self> {
        r.label.class().map(|c| Self::new(r.id.clone(), r.image.clone(), c))
    }

    pub fn to_example(&self) -> Example {
        Example { input: imaging::normalize(&self.image), label: self.class.index() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    role: Role,
    samples: Vec<Sample>,
}

impl LabeledSet {
    pub fn train(samples: Vec<Sample>) -> Self {
        Self { role: Role::Train, samples }
    }

    pub fn test(samples: Vec<Sample>) -> Self {
        Self { role: Role::Test, samples }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count(&self, class: Class) -> usize {
        self.samples.iter().filter(|s| s.class == class).count()
    }

    pub fn source_ids(&self) -> BTreeSet<&ScanId> {
        self.samples.iter().map(|s| &s.source).collect()
    }

    pub fn to_examples(&self) -> Vec<Example> {
        self.samples.iter().map(Sample::to_example).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub seed: u64,
}

/// Stratified, seeded train/test partition.
///
/// The total test size is `round(test_fraction * n)`; it is shared between
/// the classes in proportion to their counts (largest remainder).
pub fn split(records: &[Sample], spec: SplitSpec) -> Result<(LabeledSet, LabeledSet)> {
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(DatasetError::InvalidParameter(format!(
            "test_fraction must be in (0, 1), got {}",
            spec.test_fraction
        )));
    }
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(&r.id) {
            return Err(DatasetError::DuplicateId(r.id.clone()));
        }
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, r) in records.iter().enumerate() {
        by_class[r.class.index()].push(i);
    }
    if by_class.iter().any(Vec::is_empty) {
        return Err(DatasetError::Stratification);
    }
    let n = records.len();
    let n_test = ((spec.test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let exact: Vec<f64> = by_class.iter().map(|c| n_test as f64 * c.len() as f64 / n as f64).collect();
    let mut take: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order = [0usize, 1];
    order.sort_by(|&a, &b| (exact[b] - take[b] as f64).total_cmp(&(exact[a] - take[a] as f64)).then(a.cmp(&b)));
    let mut short = n_test - take.iter().sum::<usize>();
    for &c in order.iter().cycle().take(4) {
        if short == 0 {
            break;
        }
        if take[c] < by_class[c].len() {
            take[c] += 1;
            short -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut in_test = vec![false; n];
    for (c, idx) in by_class.iter_mut().enumerate() {
        idx.shuffle(&mut rng);
        for &i in &idx[..take[c]] {
            in_test[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (r, t) in records.iter().zip(in_test) {
        if t {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((LabeledSet::train(train), LabeledSet::test(test)))
}

/// Undersample the majority class to a cap, then oversample the minority by
/// whole-record duplication, so that the minority share is within one
/// record of `target_ratio`.
pub fn rebalance(set: &LabeledSet, target_ratio: f64, seed: u64) -> Result<LabeledSet> {
    if set.role == Role::Test {
        return Err(DatasetError::LeakageGuard("rebalance"));
    }
    if !(target_ratio > 0.0 && target_ratio < 1.0) {
        return Err(DatasetError::InvalidParameter(format!("target_ratio must be in (0, 1), got {target_ratio}")));
    }
    let normal = set.count(Class::Normal);
    let pneu = set.count(Class::Pneumonia);
    if normal == 0 || pneu == 0 {
        return Err(DatasetError::Stratification);
    }
    let (minority, majority) = if normal <= pneu { (Class::Normal, Class::Pneumonia) } else { (Class::Pneumonia, Class::Normal) };
    let n = set.len() as f64;
    let maj_count = set.count(majority);
    let maj_target = ((n * (1.0 - target_ratio)).round() as usize).clamp(1, maj_count);
    let min_target = ((maj_target as f64 * target_ratio / (1.0 - target_ratio)).round() as usize).max(1);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |class: Class, target: usize, rng: &mut ChaCha8Rng| -> Vec<Sample> {
        let pool: Vec<&Sample> = set.samples.iter().filter(|s| s.class == class).collect();
        if target == pool.len() {
            return pool.into_iter().cloned().collect();
        }
        if target < pool.len() {
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            idx.shuffle(rng);
            idx.truncate(target);
            idx.sort_unstable();
            return idx.into_iter().map(|i| pool[i].clone()).collect();
        }
        let mut out: Vec<Sample> = Vec::with_capacity(target);
        while out.len() + pool.len() <= target {
            out.extend(pool.iter().map(|s| (*s).clone()));
        }
        let rest = target - out.len();
        out.extend(pool.choose_multiple(rng, rest).map(|s| (*s).clone()));
        out
    };
    let mut samples = pick(majority, maj_target, &mut rng);
    samples.extend(pick(minority, min_target, &mut rng));
    Ok(LabeledSet::train(samples))
}

/// Append `copies_per_record` augmented variants of every record. Variant
/// `k` of record `id` is named `id~aug<k>` and keeps `id` as its source.
pub fn expand_with_augmentation(set: &LabeledSet, cfg: &AugmentConfig, copies_per_record: usize) -> Result<LabeledSet> {
    expand_with_augmentation_with(set, cfg, copies_per_record, Exec::default())
}

pub fn expand_with_augmentation_with(
    set: &LabeledSet,
    cfg: &AugmentConfig,
    copies_per_record: usize,
    exec: Exec,
) -> Result<LabeledSet> {
    if set.role == Role::Test {
        return Err(DatasetError::LeakageGuard("augment"));
    }
    cfg.validate()?;
    let variants = exec.map_range(set.len(), |i| {
        let s = &set.samples[i];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        (0..copies_per_record)
            .map(|k| Sample {
                id: ScanId(format!("{}~aug{k}", s.id)),
                source: s.source.clone(),
                image: imaging::augment(&s.image, cfg, &mut rng),
                class: s.class,
            })
            .collect::<Vec<_>>()
    });
    let mut out = Vec::with_capacity(set.len() * (1 + copies_per_record));
    out.extend(set.samples.iter().cloned());
    for v in variants {
        out.extend(v);
    }
    Ok(LabeledSet::train(out))
}

/// Fails on the first source id shared between the two partitions.
pub fn check_disjoint(train: &LabeledSet, test: &LabeledSet) -> Result<()> {
    let test_ids = test.source_ids();
    match train.samples.iter().find(|s| test_ids.contains(&s.source)) {
        Some(s) => Err(DatasetError::Leakage(s.source.clone())),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestAck {
    Inserted,
    Duplicate,
}

/// One exported record in a public dataset manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: ScanId,
    pub label: Label,
    pub section: Section,
}

/// Scan storage. Each record is a `<id>.pgm` raster plus a `<id>.meta`
/// key=value sidecar; `index.log` is an append-only list of ingest and
/// state-change events that fixes ingestion order.
///
/// A store without a root lives purely in memory.
#[derive(Debug)]
pub struct ScanStore {
    root: Option<PathBuf>,
    records: BTreeMap<ScanId, ScanRecord>,
    order: Vec<ScanId>,
    log: Option<File>,
}

impl ScanStore {
    pub fn in_memory() -> Self {
        Self { root: None, records: BTreeMap::new(), order: Vec::new(), log: None }
    }

    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("scans"))?;
        let index = root.join("index.log");
        let mut store = Self { root: Some(root.clone()), records: BTreeMap::new(), order: Vec::new(), log: None };
        if index.exists() {
            for line in BufReader::new(File::open(&index)?).lines() {
                let line = line?;
                let Some((op, id)) = line.split_once(' ') else { continue };
                if op != "ingest" {
                    continue;
                }
                let id = ScanId::new(id)?;
                if store.records.contains_key(&id) {
                    continue;
                }
                let rec = store.load(&id)?;
                store.order.push(id.clone());
                store.records.insert(id, rec);
            }
        }
        store.log = Some(OpenOptions::new().create(true).append(true).open(index)?);
        Ok(store)
    }

    fn paths(&self, id: &ScanId) -> Option<(PathBuf, PathBuf)> {
        self.root.as_ref().map(|r| {
            let base = r.join("scans");
            (base.join(format!("{id}.pgm")), base.join(format!("{id}.meta")))
        })
    }

    fn load(&self, id: &ScanId) -> Result<ScanRecord> {
        let (pgm, meta) = self.paths(id).expect("disk store");
        let image = GrayImage::read_pgm(&pgm)?;
        let mut rec = ScanRecord::new(id.clone(), image, Label::Unlabeled, Section::Private);
        let text = fs::read_to_string(&meta)?;
        rec.apply_sidecar(&text).map_err(|reason| DatasetError::Corrupt { path: meta, reason })?;
        Ok(rec)
    }

    fn write_sidecar(&self, rec: &ScanRecord) -> Result<()> {
        if let Some((_, meta)) = self.paths(&rec.id) {
            let tmp = meta.with_extension("meta.tmp");
            fs::write(&tmp, rec.sidecar())?;
            fs::rename(tmp, meta)?;
        }
        Ok(())
    }

    fn append_log(&mut self, op: &str, id: &ScanId) -> Result<()> {
        if let Some(log) = self.log.as_mut() {
            writeln!(log, "{op} {id}")?;
            log.flush()?;
        }
        Ok(())
    }

    /// Store a preprocessed scan in the update batch. Re-ingesting a known
    /// id is a no-op.
    pub fn ingest(&mut self, mut record: ScanRecord) -> Result<IngestAck> {
        if record.image.width() != SCAN_SIDE || record.image.height() != SCAN_SIDE {
            return Err(DatasetError::Validation(format!(
                "scan {} is {}x{}, expected {SCAN_SIDE}x{SCAN_SIDE}",
                record.id,
                record.image.width(),
                record.image.height()
            )));
        }
        if self.records.contains_key(&record.id) {
            return Ok(IngestAck::Duplicate);
        }
        record.batch = Batch::Update;
        if let Some((pgm, _)) = self.paths(&record.id) {
            record.image.write_pgm(pgm)?;
            self.write_sidecar(&record)?;
        }
        self.append_log("ingest", &record.id)?;
        self.order.push(record.id.clone());
        self.records.insert(record.id.clone(), record);
        Ok(IngestAck::Inserted)
    }

    /// Record the user's confirmation of `verdict`: confirmed keeps it as
    /// the label, rejected stores the other class.
    pub fn confirm(&mut self, id: &ScanId, confirmed: bool, verdict: Class) -> Result<()> {
        let rec = self.records.get_mut(id).ok_or_else(|| DatasetError::NotFound(id.clone()))?;
        rec.confirmed = confirmed;
        rec.label = if confirmed { verdict.into() } else { verdict.other().into() };
        let rec = rec.clone();
        self.write_sidecar(&rec)?;
        self.append_log("confirm", id)
    }

    /// Move records from the update batch to the used batch.
    pub fn mark_used(&mut self, ids: &[ScanId]) -> Result<()> {
        for id in ids {
            let rec = self.records.get_mut(id).ok_or_else(|| DatasetError::NotFound(id.clone()))?;
            if rec.batch == Batch::Used {
                continue;
            }
            rec.batch = Batch::Used;
            let rec = rec.clone();
            self.write_sidecar(&rec)?;
            self.append_log("used", id)?;
        }
        Ok(())
    }

    pub fn set_diversity(&mut self, id: &ScanId, meta: DiversityMeta) -> Result<()> {
        let rec = self.records.get_mut(id).ok_or_else(|| DatasetError::NotFound(id.clone()))?;
        rec.diversity = meta;
        let rec = rec.clone();
        self.write_sidecar(&rec)
    }

    pub fn get(&self, id: &ScanId) -> Option<&ScanRecord> {
        self.records.get(id)
    }

    pub fn contains(&self, id: &ScanId) -> bool {
        self.records.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records in ingestion order.
    pub fn records(&self) -> impl Iterator<Item = &ScanRecord> {
        self.order.iter().map(|id| &self.records[id])
    }

    /// Labeled records awaiting the next retrain.
    pub fn update_batch(&self) -> Vec<&ScanRecord> {
        self.records().filter(|r| r.batch == Batch::Update && r.label != Label::Unlabeled).collect()
    }

    /// Labeled records already consumed by a retrain.
    pub fn used_batch(&self) -> Vec<&ScanRecord> {
        self.records().filter(|r| r.batch == Batch::Used && r.label != Label::Unlabeled).collect()
    }

    pub fn count_section(&self, section: Section) -> usize {
        self.records.values().filter(|r| r.section == section).count()
    }

    /// Write every public record to `dir` as `<id>.pgm` plus a `manifest.tsv`
    /// listing id, label and section. Private records are never touched.
    pub fn export_public(&self, dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut manifest = String::from("# id\tlabel\tsection\n");
        let mut entries = Vec::new();
        for rec in self.records().filter(|r| r.section == Section::Public) {
            let bytes = match self.paths(&rec.id) {
                Some((pgm, _)) => fs::read(pgm)?,
                None => rec.image.to_pgm(),
            };
            fs::write(dir.join(format!("{}.pgm", rec.id)), bytes)?;
            manifest.push_str(&format!("{}\t{}\t{}\n", rec.id, rec.label.as_str(), rec.section.as_str()));
            entries.push(ManifestEntry { id: rec.id.clone(), label: rec.label, section: rec.section });
        }
        fs::write(dir.join("manifest.tsv"), manifest)?;
        Ok(entries)
    }

    /// Stored PGM bytes of a record.
    pub fn pgm_bytes(&self, id: &ScanId) -> Result<Vec<u8>> {
        let rec = self.get(id).ok_or_else(|| DatasetError::NotFound(id.clone()))?;
        match self.paths(id) {
            Some((pgm, _)) => Ok(fs::read(pgm)?),
            None => Ok(rec.image.to_pgm()),
        }
    }
}

/// Load a labeled directory: either `<dir>/{normal,pneumonia}/*.pgm` class
/// folders, or a scan store with labeled records.
pub fn load_labeled_dir(dir: impl AsRef<Path>, side: usize) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    let class_dirs = [(Class::Normal, dir.join("normal")), (Class::Pneumonia, dir.join("pneumonia"))];
    if class_dirs.iter().any(|(_, p)| p.is_dir()) {
        for (class, path) in class_dirs {
            if !path.is_dir() {
                continue;
            }
            let mut files: Vec<PathBuf> = fs::read_dir(&path)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
                .collect();
            files.sort();
            for f in files {
                let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                let id = ScanId::new(format!("{}-{stem}", class.name().to_ascii_lowercase()))?;
                let img = GrayImage::read_pgm(&f)?;
                let img = if img.width() == side && img.height() == side { img } else { imaging::resize_bilinear(&img, side)? };
                out.push(Sample::new(id, img, class));
            }
        }
        return Ok(out);
    }
    let store = ScanStore::open(dir)?;
    Ok(store.records().filter_map(Sample::from_record).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(normal: usize, pneumonia: usize) -> Vec<Sample> {
        let img = GrayImage::filled(4, 4, 0);
        (0..normal)
            .map(|i| Sample::new(ScanId::new(format!("n{i}")).unwrap(), img.clone(), Class::Normal))
            .chain((0..pneumonia).map(|i| Sample::new(ScanId::new(format!("p{i}")).unwrap(), img.clone(), Class::Pneumonia)))
            .collect()
    }

    #[test]
    fn split_sizes() {
        let (train, test) = split(&samples(5, 5), SplitSpec { test_fraction: 0.2, seed: 1 }).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        assert_eq!(test.count(Class::Normal), 1);
        check_disjoint(&train, &test).unwrap();

        // 1583 normal / 4273 pneumonia = 5856 scans; a 624-scan test split leaves 5232
        let all = samples(1583, 4273);
        let (train, test) = split(&all, SplitSpec { test_fraction: 624.0 / 5856.0, seed: 9 }).unwrap();
        assert_eq!((train.len(), test.len()), (5232, 624));
    }

    #[test]
    fn split_requires_both_classes() {
        assert!(matches!(split(&samples(4, 0), SplitSpec { test_fraction: 0.5, seed: 0 }), Err(DatasetError::Stratification)));
        assert!(split(&samples(4, 4), SplitSpec { test_fraction: 1.0, seed: 0 }).is_err());
        let mut dup = samples(2, 2);
        dup[1].id = dup[0].id.clone();
        assert!(matches!(split(&dup, SplitSpec { test_fraction: 0.5, seed: 0 }), Err(DatasetError::DuplicateId(_))));
    }

    #[test]
    fn split_is_deterministic() {
        let all = samples(30, 70);
        let a = split(&all, SplitSpec { test_fraction: 0.3, seed: 5 }).unwrap();
        let b = split(&all, SplitSpec { test_fraction: 0.3, seed: 5 }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rebalance_reference_counts() {
        let set = LabeledSet::train(samples(1349, 3883));
        let out = rebalance(&set, 0.5, 3).unwrap();
        let (n, p) = (out.count(Class::Normal) as i64, out.count(Class::Pneumonia) as i64);
        assert!((n - p).abs() <= 1, "{n} vs {p}");
        let ids: BTreeSet<_> = set.samples().iter().map(|s| &s.id).collect();
        assert!(out.samples().iter().all(|s| ids.contains(&s.id)));
    }

    #[test]
    fn rebalance_fixed_point() {
        let set = LabeledSet::train(samples(20, 20));
        let out = rebalance(&set, 0.5, 3).unwrap();
        let mut a: Vec<_> = set.samples().iter().map(|s| s.id.clone()).collect();
        let mut b: Vec<_> = out.samples().iter().map(|s| s.id.clone()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn rebalance_refuses_test_partition() {
        let set = LabeledSet::test(samples(3, 9));
        assert!(matches!(rebalance(&set, 0.5, 0), Err(DatasetError::LeakageGuard(_))));
        assert!(matches!(
            expand_with_augmentation(&set, &AugmentConfig::identity(), 1),
            Err(DatasetError::LeakageGuard(_))
        ));
    }

    #[test]
    fn augmentation_sizes_and_sources() {
        let set = LabeledSet::train(samples(40, 60));
        let out = expand_with_augmentation(&set, &AugmentConfig::default(), 7).unwrap();
        assert_eq!(out.len(), 800);
        let ids: BTreeSet<_> = set.samples().iter().map(|s| &s.id).collect();
        assert!(out.samples().iter().all(|s| ids.contains(&s.source)));
        let seq = expand_with_augmentation_with(&set, &AugmentConfig::default(), 7, Exec::Sequential).unwrap();
        assert_eq!(out, seq);
    }

    #[test]
    fn scan_ids_are_file_safe() {
        assert!(ScanId::new("c1-000042").is_ok());
        assert!(ScanId::new("../etc").is_err());
        assert!(ScanId::new("").is_err());
        assert!(ScanId::new("a b").is_err());
    }

    fn scan(id: &str, section: Section) -> ScanRecord {
        ScanRecord::new(ScanId::new(id).unwrap(), GrayImage::filled(SCAN_SIDE, SCAN_SIDE, 9), Label::Unlabeled, section)
    }

    #[test]
    fn ingest_state_machine() {
        let mut store = ScanStore::in_memory();
        assert_eq!(store.ingest(scan("a", Section::Private)).unwrap(), IngestAck::Inserted);
        assert_eq!(store.ingest(scan("a", Section::Private)).unwrap(), IngestAck::Duplicate);
        assert_eq!(store.len(), 1);
        assert!(store.update_batch().is_empty());
        let id = ScanId::new("a").unwrap();
        store.confirm(&id, true, Class::Pneumonia).unwrap();
        assert_eq!(store.update_batch().len(), 1);
        assert_eq!(store.get(&id).unwrap().label, Label::Pneumonia);
        store.confirm(&id, false, Class::Pneumonia).unwrap();
        assert_eq!(store.get(&id).unwrap().label, Label::Normal);
        store.mark_used(std::slice::from_ref(&id)).unwrap();
        assert!(store.update_batch().is_empty());
        assert_eq!(store.get(&id).unwrap().batch, Batch::Used);
        assert_eq!(store.used_batch().len(), 1);
    }

    #[test]
    fn ingest_rejects_wrong_size() {
        let mut store = ScanStore::in_memory();
        let rec = ScanRecord::new(ScanId::new("x").unwrap(), GrayImage::filled(64, 64, 0), Label::Normal, Section::Public);
        assert!(matches!(store.ingest(rec), Err(DatasetError::Validation(_))));
        let unknown = ScanId::new("nope").unwrap();
        assert!(matches!(store.confirm(&unknown, true, Class::Normal), Err(DatasetError::NotFound(_))));
    }

    #[test]
    fn disk_store_survives_reopen_and_exports_public_only() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut store = ScanStore::open(dir.path()).unwrap();
            let mut rec = scan("pub1", Section::Public);
            rec.diversity.hospital = Some("Site A".into());
            rec.diversity.age = Some(61);
            store.ingest(rec).unwrap();
            store.ingest(scan("priv1", Section::Private)).unwrap();
            store.ingest(scan("pub2", Section::Public)).unwrap();
            store.confirm(&ScanId::new("pub1").unwrap(), true, Class::Normal).unwrap();
            store.mark_used(&[ScanId::new("pub1").unwrap()]).unwrap();
        }
        let store = ScanStore::open(dir.path()).unwrap();
        let ids: Vec<_> = store.records().map(|r| r.id.as_str().to_string()).collect();
        assert_eq!(ids, ["pub1", "priv1", "pub2"]);
        let pub1 = store.get(&ScanId::new("pub1").unwrap()).unwrap();
        assert_eq!((pub1.label, pub1.batch, pub1.confirmed), (Label::Normal, Batch::Used, true));
        assert_eq!(pub1.diversity.hospital.as_deref(), Some("Site A"));
        assert_eq!(pub1.diversity.age, Some(61));

        let out = dir.path().join("export");
        let manifest = store.export_public(&out).unwrap();
        assert_eq!(manifest.len(), store.count_section(Section::Public));
        assert!(!out.join("priv1.pgm").exists());
        let text = fs::read_to_string(out.join("manifest.tsv")).unwrap();
        assert!(!text.contains("priv1"));
        for e in &manifest {
            let exported = fs::read(out.join(format!("{}.pgm", e.id))).unwrap();
            assert_eq!(exported, store.pgm_bytes(&e.id).unwrap());
        }
    }

    #[test]
    fn empty_export() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ScanStore::in_memory();
        store.ingest(scan("p", Section::Private)).unwrap();
        assert!(store.export_public(dir.path()).unwrap().is_empty());
        assert_eq!(fs::read_to_string(dir.path().join("manifest.tsv")).unwrap(), "# id\tlabel\tsection\n");
    }
}

//! Disk-backed FIFO of scans and confirmations awaiting upload.
//!
//! The file is an append-only log of records `u32 len | u32 crc | payload`.
//! A `put` payload is `1 | u64 enqueued ms | FlushBatch frame`; a `remove`
//! payload is `2 | u8 kind | u8 id len | id`. A torn tail left by a crash
//! is cut off on open. The log is rewritten once dead records outnumber
//! live ones.

use std::collections::VecDeque;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use crate::protocol::{decode_frame, encode_frame, FlushItem, Message, ProtocolError};

const OP_PUT: u8 = 1;
const OP_REMOVE: u8 = 2;
const COMPACT_MIN_DEAD: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    Scan = 0,
    Confirm = 1,
}

impl ItemKind {
    pub fn of(item: &FlushItem) -> Self {
        match item {
            FlushItem::Scan { .. } => ItemKind::Scan,
            FlushItem::Confirm(_) => ItemKind::Confirm,
        }
    }
}

pub fn item_id(item: &FlushItem) -> &str {
    match item {
        FlushItem::Scan { request, .. } => &request.meta.scan_id,
        FlushItem::Confirm(c) => &c.scan_id,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub item: FlushItem,
    pub enqueued_ms: u64,
}

impl CacheEntry {
    pub fn key(&self) -> (ItemKind, &str) {
        (ItemKind::of(&self.item), item_id(&self.item))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Enqueued {
    Added,
    /// A scan with this id is already queued.
    Duplicate,
    /// A pending confirmation for this id was overwritten in place.
    Replaced,
}

#[derive(Debug)]
pub struct PictureCache {
    path: Option<PathBuf>,
    file: Option<File>,
    entries: VecDeque<CacheEntry>,
    dead: usize,
}

fn record(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out.extend_from_slice(payload);
    out
}

fn put_payload(e: &CacheEntry) -> Result<Vec<u8>, CacheError> {
    let mut p = vec![OP_PUT];
    p.extend_from_slice(&e.enqueued_ms.to_le_bytes());
    p.extend_from_slice(&encode_frame(&Message::FlushBatch(e.item.clone()))?);
    Ok(p)
}

fn remove_payload(kind: ItemKind, id: &str) -> Vec<u8> {
    let mut p = vec![OP_REMOVE, kind as u8, id.len() as u8];
    p.extend_from_slice(id.as_bytes());
    p
}

enum Op {
    Put(CacheEntry),
    Remove(ItemKind, String),
}

fn parse(payload: &[u8]) -> Option<Op> {
    match *payload.first()? {
        OP_PUT if payload.len() > 9 => {
            let enqueued_ms = u64::from_le_bytes(payload[1..9].try_into().ok()?);
            match decode_frame(&payload[9..]).ok()? {
                Message::FlushBatch(item) => Some(Op::Put(CacheEntry { item, enqueued_ms })),
                _ => None,
            }
        }
        OP_REMOVE if payload.len() >= 3 => {
            let kind = match payload[1] {
                0 => ItemKind::Scan,
                1 => ItemKind::Confirm,
                _ => return None,
            };
            let n = payload[2] as usize;
            let id = std::str::from_utf8(payload.get(3..3 + n)?).ok()?.to_string();
            Some(Op::Remove(kind, id))
        }
        _ => None,
    }
}

impl PictureCache {
    pub fn in_memory() -> Self {
        Self { path: None, file: None, entries: VecDeque::new(), dead: 0 }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, CacheError> {
        let path = path.as_ref().to_path_buf();
        let mut bytes = Vec::new();
        if path.exists() {
            File::open(&path)?.read_to_end(&mut bytes)?;
        }
        let mut cache = Self { path: Some(path.clone()), file: None, entries: VecDeque::new(), dead: 0 };
        let mut pos = 0;
        while pos + 8 <= bytes.len() {
            let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
            let crc = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap());
            let Some(payload) = bytes.get(pos + 8..pos + 8 + len) else { break };
            if crc32fast::hash(payload) != crc {
                break;
            }
            let Some(op) = parse(payload) else { break };
            match op {
                Op::Put(e) => {
                    cache.apply_put(e);
                }
                Op::Remove(kind, id) => {
                    cache.apply_remove(kind, &id);
                }
            }
            pos += 8 + len;
        }
        if pos < bytes.len() {
            log::warn!("cache {}: dropping {} bytes of torn tail", path.display(), bytes.len() - pos);
            let f = OpenOptions::new().write(true).open(&path)?;
            f.set_len(pos as u64)?;
            f.sync_all()?;
        }
        cache.file = Some(OpenOptions::new().create(true).append(true).open(&path)?);
        Ok(cache)
    }

    fn position(&self, kind: ItemKind, id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.key() == (kind, id))
    }

    fn apply_put(&mut self, e: CacheEntry) -> Enqueued {
        let kind = ItemKind::of(&e.item);
        match (self.position(kind, item_id(&e.item)), kind) {
            (Some(_), ItemKind::Scan) => Enqueued::Duplicate,
            (Some(i), ItemKind::Confirm) => {
                self.entries[i].item = e.item;
                self.dead += 1;
                Enqueued::Replaced
            }
            (None, _) => {
                self.entries.push_back(e);
                Enqueued::Added
            }
        }
    }

    fn apply_remove(&mut self, kind: ItemKind, id: &str) -> bool {
        match self.position(kind, id) {
            Some(i) => {
                self.entries.remove(i);
                // the put and the remove are both dead now
                self.dead += 2;
                true
            }
            None => false,
        }
    }

    fn append(&mut self, payload: &[u8]) -> Result<(), CacheError> {
        if let Some(f) = self.file.as_mut() {
            f.write_all(&record(payload))?;
            f.sync_data()?;
        }
        Ok(())
    }

    pub fn push(&mut self, item: FlushItem, enqueued_ms: u64) -> Result<Enqueued, CacheError> {
        let entry = CacheEntry { item, enqueued_ms };
        let kind = ItemKind::of(&entry.item);
        if kind == ItemKind::Scan && self.position(kind, item_id(&entry.item)).is_some() {
            return Ok(Enqueued::Duplicate);
        }
        self.append(&put_payload(&entry)?)?;
        Ok(self.apply_put(entry))
    }

    pub fn front(&self) -> Option<&CacheEntry> {
        self.entries.front()
    }

    pub fn remove(&mut self, kind: ItemKind, id: &str) -> Result<bool, CacheError> {
        if self.position(kind, id).is_none() {
            return Ok(false);
        }
        self.append(&remove_payload(kind, id))?;
        self.apply_remove(kind, id);
        self.maybe_compact()?;
        Ok(true)
    }

    pub fn contains(&self, kind: ItemKind, id: &str) -> bool {
        self.position(kind, id).is_some()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &CacheEntry> {
        self.entries.iter()
    }

    fn maybe_compact(&mut self) -> Result<(), CacheError> {
        if self.dead >= COMPACT_MIN_DEAD && self.dead > self.entries.len() {
            self.compact()?;
        }
        Ok(())
    }

    /// Rewrite the log with only the live entries.
    pub fn compact(&mut self) -> Result<(), CacheError> {
        let Some(path) = self.path.clone() else {
            self.dead = 0;
            return Ok(());
        };
        let tmp = path.with_extension("compact");
        {
            let mut f = File::create(&tmp)?;
            for e in &self.entries {
                f.write_all(&record(&put_payload(e)?))?;
            }
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        self.file = Some(OpenOptions::new().append(true).open(&path)?);
        self.dead = 0;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{Confirmation, PredictRequest, RequestMeta, IMAGE_LEN};
    use cxr_core::metrics::Class;

    fn scan(id: &str) -> FlushItem {
        FlushItem::Scan {
            request: PredictRequest {
                meta: RequestMeta { scan_id: id.into(), ..Default::default() },
                image: vec![id.len() as u8; IMAGE_LEN],
            },
            local_probability: 0.25,
            local_verdict: Class::Normal,
            local_version: 1,
        }
    }

    fn confirm(id: &str, confirmed: bool) -> FlushItem {
        FlushItem::Confirm(Confirmation { scan_id: id.into(), confirmed, verdict: Class::Pneumonia })
    }

    fn ids(c: &PictureCache) -> Vec<(ItemKind, String)> {
        c.entries().map(|e| (e.key().0, e.key().1.to_string())).collect()
    }

    #[test]
    fn survives_reopen_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cache.log");
        {
            let mut c = PictureCache::open(&p).unwrap();
            c.push(scan("a"), 1).unwrap();
            c.push(scan("b"), 2).unwrap();
            c.push(confirm("a", true), 3).unwrap();
            c.remove(ItemKind::Scan, "a").unwrap();
        }
        let c = PictureCache::open(&p).unwrap();
        assert_eq!(ids(&c), [(ItemKind::Scan, "b".into()), (ItemKind::Confirm, "a".into())]);
        assert_eq!(c.front().unwrap().enqueued_ms, 2);
    }

    #[test]
    fn scan_dedup_and_confirm_replace() {
        let mut c = PictureCache::in_memory();
        assert_eq!(c.push(scan("a"), 1).unwrap(), Enqueued::Added);
        assert_eq!(c.push(scan("a"), 2).unwrap(), Enqueued::Duplicate);
        assert_eq!(c.push(confirm("a", false), 3).unwrap(), Enqueued::Added);
        assert_eq!(c.push(confirm("a", true), 4).unwrap(), Enqueued::Replaced);
        assert_eq!(c.len(), 2);
        assert_eq!(c.entries().nth(1).unwrap().item, confirm("a", true));
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cache.log");
        {
            let mut c = PictureCache::open(&p).unwrap();
            c.push(scan("a"), 1).unwrap();
            c.push(scan("b"), 2).unwrap();
        }
        let len = fs::metadata(&p).unwrap().len();
        OpenOptions::new().write(true).open(&p).unwrap().set_len(len - 100).unwrap();
        let mut c = PictureCache::open(&p).unwrap();
        assert_eq!(ids(&c), [(ItemKind::Scan, "a".into())]);
        c.push(scan("c"), 3).unwrap();
        drop(c);
        let c = PictureCache::open(&p).unwrap();
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn compaction_keeps_live_entries() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cache.log");
        let mut c = PictureCache::open(&p).unwrap();
        for i in 0..100 {
            c.push(confirm(&format!("s{i}"), true), i).unwrap();
        }
        for i in 0..95 {
            c.remove(ItemKind::Confirm, &format!("s{i}")).unwrap();
        }
        assert!(c.dead < 100, "compaction should have run");
        drop(c);
        let c = PictureCache::open(&p).unwrap();
        let want: Vec<_> = (95..100).map(|i| (ItemKind::Confirm, format!("s{i}"))).collect();
        assert_eq!(ids(&c), want);
    }
}

//! Append-only record store: one newline-delimited JSON file per
//! `(node, UTC date)` partition under `root/{node}/{YYYY-MM-DD}.ndjson`.
//!
//! Readers only ever see the committed prefix of a partition, so a line
//! being written is never observed half-finished. On open, every partition
//! is scanned; a final line cut short by a crash is skipped with a warning
//! and trimmed so later appends start on a clean boundary.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use irrigo_core::schema::validate_node_id;

/// Records between seek checkpoints in a time-ordered partition.
const CHECKPOINT_EVERY: usize = 128;
pub const DEAD_LETTER_FILE: &str = "dead-letter.ndjson";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("store is full ({used} of {limit} bytes)")]
    Full { used: u64, limit: u64 },
    #[error("timestamp {0} is outside the representable range")]
    BadTimestamp(i64),
    #[error(transparent)]
    NodeId(#[from] irrigo_core::schema::SchemaError),
    #[error("invalid range: from {from} > to {to}")]
    Range { from: i64, to: i64 },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Telemetry,
    Event,
    Status,
}

impl RecordKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::Telemetry => "telemetry",
            RecordKind::Event => "event",
            RecordKind::Status => "status",
        }
    }
}

/// One stored message. `ts` is the device timestamp (or receive time when
/// the payload has none); `recv` is when the server took it in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreRecord {
    pub kind: RecordKind,
    pub node: String,
    pub ts: i64,
    pub recv: i64,
    pub payload: serde_json::Value,
    /// Repeat of an earlier event with the same (node, ts, predicted_ml).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub dup: bool,
}

impl StoreRecord {
    pub fn new(kind: RecordKind, node: impl Into<String>, ts: i64, recv: i64, payload: serde_json::Value) -> Self {
        Self { kind, node: node.into(), ts, recv, payload, dup: false }
    }

    fn dedup_key(&self) -> Option<(String, i64, u64)> {
        if self.kind != RecordKind::Event {
            return None;
        }
        let ml = self.payload.get("predicted_ml")?.as_f64()?;
        Some((self.node.clone(), self.ts, ml.to_bits()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreOptions {
    pub root: PathBuf,
    /// Byte budget across all partitions; appends beyond it fail with
    /// [`StoreError::Full`].
    pub max_bytes: Option<u64>,
}

impl StoreOptions {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), max_bytes: None }
    }
}

/// What the open-time scan found.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RecoveryReport {
    pub partitions: usize,
    pub records: usize,
    pub skipped_lines: usize,
    pub trimmed_bytes: u64,
}

#[derive(Debug, Clone)]
struct Partition {
    path: PathBuf,
    committed: u64,
    count: usize,
    min_ts: i64,
    max_ts: i64,
    /// True while every append so far had ts >= the previous one.
    ordered: bool,
    /// (ts, byte offset) of every CHECKPOINT_EVERY-th record.
    checkpoints: Vec<(i64, u64)>,
}

impl Partition {
    fn new(path: PathBuf) -> Self {
        Self { path, committed: 0, count: 0, min_ts: i64::MAX, max_ts: i64::MIN, ordered: true, checkpoints: Vec::new() }
    }

    fn note(&mut self, ts: i64, offset: u64, len: u64) {
        if self.count.is_multiple_of(CHECKPOINT_EVERY) {
            self.checkpoints.push((ts, offset));
        }
        if self.count > 0 && ts < self.max_ts {
            self.ordered = false;
        }
        self.count += 1;
        self.min_ts = self.min_ts.min(ts);
        self.max_ts = self.max_ts.max(ts);
        self.committed = offset + len;
    }

    /// Byte offset from which a scan for `ts >= from` can start.
    fn seek_for(&self, from: i64) -> u64 {
        if !self.ordered {
            return 0;
        }
        let i = self.checkpoints.partition_point(|&(ts, _)| ts < from);
        if i == 0 {
            0
        } else {
            self.checkpoints[i - 1].1
        }
    }
}

/// A time-range read over one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub node: String,
    pub kind: Option<RecordKind>,
    pub from: i64,
    pub to: i64,
    pub limit: usize,
}

pub const MAX_LIMIT: usize = 10_000;

impl Query {
    pub fn new(node: impl Into<String>) -> Self {
        Self { node: node.into(), kind: None, from: i64::MIN, to: i64::MAX, limit: MAX_LIMIT }
    }

    pub fn kind(mut self, kind: RecordKind) -> Self {
        self.kind = Some(kind);
        self
    }

    pub fn range(mut self, from: i64, to: i64) -> Self {
        self.from = from;
        self.to = to;
        self
    }

    pub fn limit(mut self, limit: usize) -> Self {
        self.limit = limit;
        self
    }
}

/// Immutable view of the partitions a query needs.
#[derive(Debug, Clone)]
pub struct Snapshot {
    parts: Vec<(PathBuf, u64, u64)>,
    query: Query,
}

impl Snapshot {
    /// Reads the committed prefix of each partition. Safe to run without
    /// holding the store lock.
    pub fn read(&self) -> Result<Vec<StoreRecord>, StoreError> {
        let q = &self.query;
        let mut out = Vec::new();
        for (path, start, end) in &self.parts {
            let mut f = File::open(path).map_err(io(path))?;
            f.seek(SeekFrom::Start(*start)).map_err(io(path))?;
            let reader = BufReader::new(f.take(end - start));
            for line in reader.lines() {
                let line = line.map_err(io(path))?;
                let Ok(r) = serde_json::from_str::<StoreRecord>(&line) else { continue };
                if r.ts >= q.from && r.ts <= q.to && q.kind.is_none_or(|k| k == r.kind) {
                    out.push(r);
                }
            }
        }
        // partitions are date-ordered; within one, stable sort keeps write order on ties
        out.sort_by_key(|r| r.ts);
        out.truncate(q.limit);
        Ok(out)
    }
}

pub struct Store {
    opts: StoreOptions,
    parts: BTreeMap<(String, NaiveDate), Partition>,
    handles: HashMap<(String, NaiveDate), File>,
    seen_events: HashSet<(String, i64, u64)>,
    latest: HashMap<(String, RecordKind), StoreRecord>,
    bytes: u64,
    dead_letters: usize,
    recovery: RecoveryReport,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("root", &self.opts.root).field("partitions", &self.parts.len()).finish()
    }
}

fn utc_date(ts: i64) -> Result<NaiveDate, StoreError> {
    DateTime::from_timestamp_millis(ts).map(|d| d.date_naive()).ok_or(StoreError::BadTimestamp(ts))
}

impl Store {
    /// Opens (creating if needed) the store and recovers every partition.
    pub fn open(opts: StoreOptions) -> Result<Self, StoreError> {
        fs::create_dir_all(&opts.root).map_err(io(&opts.root))?;
        let mut store = Self {
            opts,
            parts: BTreeMap::new(),
            handles: HashMap::new(),
            seen_events: HashSet::new(),
            latest: HashMap::new(),
            bytes: 0,
            dead_letters: 0,
            recovery: RecoveryReport::default(),
        };
        let dl = store.opts.root.join(DEAD_LETTER_FILE);
        if let Ok(f) = File::open(&dl) {
            store.dead_letters = BufReader::new(f).lines().count();
        }
        let root = store.opts.root.clone();
        let mut dirs: Vec<PathBuf> = fs::read_dir(&root).map_err(io(&root))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        dirs.sort();
        for dir in dirs.into_iter().filter(|d| d.is_dir()) {
            let Some(node) = dir.file_name().and_then(|n| n.to_str()).map(String::from) else { continue };
            if validate_node_id(&node).is_err() {
                continue;
            }
            let mut files: Vec<PathBuf> = fs::read_dir(&dir).map_err(io(&dir))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
            files.sort();
            for path in files {
                let date = path
                    .file_name()
                    .and_then(|n| n.to_str())
                    .and_then(|n| n.strip_suffix(".ndjson"))
                    .and_then(|d| NaiveDate::parse_from_str(d, "%Y-%m-%d").ok());
                if let Some(date) = date {
                    store.recover(node.clone(), date, path)?;
                }
            }
        }
        Ok(store)
    }

    fn recover(&mut self, node: String, date: NaiveDate, path: PathBuf) -> Result<(), StoreError> {
        let data = fs::read(&path).map_err(io(&path))?;
        let mut part = Partition::new(path.clone());
        let mut offset = 0u64;
        let mut good_end = 0u64;
        for chunk in data.split_inclusive(|&b| b == b'\n') {
            let len = chunk.len() as u64;
            let complete = chunk.ends_with(b"\n");
            match serde_json::from_slice::<StoreRecord>(chunk).ok().filter(|_| complete) {
                Some(mut r) => {
                    if let Some(k) = r.dedup_key() {
                        r.dup = !self.seen_events.insert(k);
                    }
                    part.note(r.ts, offset, len);
                    self.note_latest(r);
                    good_end = offset + len;
                }
                None if !complete => {
                    log::warn!("{}: dropping partial final line ({len} bytes)", path.display());
                    self.recovery.skipped_lines += 1;
                }
                None => {
                    log::warn!("{}: skipping unreadable line at byte {offset}", path.display());
                    self.recovery.skipped_lines += 1;
                    good_end = offset + len;
                    part.committed = good_end;
                }
            }
            offset += len;
        }
        if good_end < data.len() as u64 {
            let f = OpenOptions::new().write(true).open(&path).map_err(io(&path))?;
            f.set_len(good_end).map_err(io(&path))?;
            self.recovery.trimmed_bytes += data.len() as u64 - good_end;
        }
        part.committed = good_end;
        self.recovery.partitions += 1;
        self.recovery.records += part.count;
        self.bytes += good_end;
        self.parts.insert((node, date), part);
        Ok(())
    }

    fn note_latest(&mut self, r: StoreRecord) {
        let key = (r.node.clone(), r.kind);
        if self.latest.get(&key).is_none_or(|old| r.ts >= old.ts) {
            self.latest.insert(key, r);
        }
    }

    pub fn root(&self) -> &Path {
        &self.opts.root
    }

    pub fn recovery(&self) -> &RecoveryReport {
        &self.recovery
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    pub fn record_count(&self) -> usize {
        self.parts.values().map(|p| p.count).sum()
    }

    pub fn dead_letter_count(&self) -> usize {
        self.dead_letters
    }

    /// Appends one record; returns it with the duplicate flag set.
    pub fn append(&mut self, mut rec: StoreRecord) -> Result<StoreRecord, StoreError> {
        validate_node_id(&rec.node)?;
        let date = utc_date(rec.ts)?;
        let key = rec.dedup_key();
        rec.dup = key.as_ref().is_some_and(|k| self.seen_events.contains(k));
        let mut line = serde_json::to_vec(&rec).expect("record serializes");
        line.push(b'\n');
        let len = line.len() as u64;
        if let Some(limit) = self.opts.max_bytes {
            if self.bytes + len > limit {
                return Err(StoreError::Full { used: self.bytes, limit });
            }
        }
        let pkey = (rec.node.clone(), date);
        if !self.parts.contains_key(&pkey) {
            let dir = self.opts.root.join(&rec.node);
            fs::create_dir_all(&dir).map_err(io(&dir))?;
            let path = dir.join(format!("{}.ndjson", date.format("%Y-%m-%d")));
            self.parts.insert(pkey.clone(), Partition::new(path));
        }
        let part = self.parts.get_mut(&pkey).expect("partition exists");
        if !self.handles.contains_key(&pkey) {
            let f = OpenOptions::new().create(true).append(true).open(&part.path).map_err(io(&part.path))?;
            self.handles.insert(pkey.clone(), f);
        }
        let f = self.handles.get_mut(&pkey).expect("handle exists");
        if let Err(e) = f.write_all(&line).and_then(|_| f.flush()) {
            // a partial write is trimmed away by the next open
            self.handles.remove(&pkey);
            return Err(StoreError::Io { path: part.path.clone(), source: e });
        }
        part.note(rec.ts, part.committed, len);
        self.bytes += len;
        if let Some(k) = key {
            self.seen_events.insert(k);
        }
        self.note_latest(rec.clone());
        Ok(rec)
    }

    /// Quarantines an unusable message; one JSON line per call.
    pub fn dead_letter(&mut self, topic: &str, payload: &[u8], reason: &str, recv: i64) -> Result<(), StoreError> {
        let path = self.opts.root.join(DEAD_LETTER_FILE);
        let entry = serde_json::json!({
            "recv": recv,
            "topic": topic,
            "payload": String::from_utf8_lossy(payload),
            "reason": reason,
        });
        let mut line = entry.to_string().into_bytes();
        line.push(b'\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io(&path))?;
        f.write_all(&line).map_err(io(&path))?;
        self.dead_letters += 1;
        Ok(())
    }

    pub fn dead_letter_path(&self) -> PathBuf {
        self.opts.root.join(DEAD_LETTER_FILE)
    }

    pub fn nodes(&self) -> Vec<String> {
        let mut v: Vec<String> = self.parts.keys().map(|(n, _)| n.clone()).collect();
        v.dedup();
        v
    }

    pub fn latest(&self, node: &str, kind: RecordKind) -> Option<&StoreRecord> {
        self.latest.get(&(node.to_string(), kind))
    }

    /// Resolves the partitions and byte ranges a query touches.
    pub fn snapshot(&self, q: &Query) -> Result<Snapshot, StoreError> {
        if q.from > q.to {
            return Err(StoreError::Range { from: q.from, to: q.to });
        }
        let mut q = q.clone();
        q.limit = q.limit.min(MAX_LIMIT);
        let parts = self
            .parts
            .range((q.node.clone(), NaiveDate::MIN)..=(q.node.clone(), NaiveDate::MAX))
            .map(|(_, p)| p)
            .filter(|p| p.count > 0 && p.max_ts >= q.from && p.min_ts <= q.to)
            .map(|p| (p.path.clone(), p.seek_for(q.from), p.committed))
            .collect();
        Ok(Snapshot { parts, query: q })
    }

    pub fn query(&self, q: &Query) -> Result<Vec<StoreRecord>, StoreError> {
        self.snapshot(q)?.read()
    }
}

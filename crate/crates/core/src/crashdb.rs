//! Content-addressed crash database.
//!
//! Layout:
//!
//! ```text
//! <store>/blobs/<sha256>   raw crashing input, bit-exact
//! <store>/index.jsonl      one CrashRecord per line, append-only
//! ```
//!
//! A record is identified by `(input_hash, source_target_hash)`. Attaching a
//! signature appends a new revision of the record; on load the highest
//! revision wins. Nothing is rewritten in place.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::hash::{Hash, Hasher};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::{sha256_hex, Arch, CrashSignal, VersionInfo};

pub const INDEX_FILE: &str = "index.jsonl";
pub const BLOB_DIR: &str = "blobs";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store i/o on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("invalid crash record: {0}")]
    Validation(String),
    #[error("corrupt index line {line}: {message}")]
    CorruptIndex { line: usize, message: String },
    #[error("blob {0} is missing or does not match its hash")]
    BadBlob(String),
    #[error("no record with id {0}")]
    UnknownRecord(RecordId),
    #[error("record {0} already carries a different signature")]
    AlreadySigned(RecordId),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Stable id derived from the record's uniqueness key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RecordId(pub String);

impl RecordId {
    pub fn for_key(input_hash: &str, target_hash: &str) -> Self {
        RecordId(sha256_hex(format!("{input_hash}:{target_hash}").as_bytes())[..32].to_string())
    }
}

impl fmt::Display for RecordId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Discovery {
    Fuzzing,
    Reuse,
}

/// Dedup key of a crash: the signal plus a digest of the top stack frames.
/// Two signatures are equal iff signal and `frame_hash` are.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrashSignature {
    pub signal: CrashSignal,
    /// Hex of a 16-byte digest over the normalized top frames.
    pub frame_hash: String,
    pub top_frame: String,
    /// Set when no backtrace was available.
    #[serde(default)]
    pub low_confidence: bool,
}

impl PartialEq for CrashSignature {
    fn eq(&self, other: &Self) -> bool {
        self.signal == other.signal && self.frame_hash == other.frame_hash
    }
}

impl Eq for CrashSignature {}

impl Hash for CrashSignature {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.signal.hash(state);
        self.frame_hash.hash(state);
    }
}

impl PartialOrd for CrashSignature {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for CrashSignature {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.signal, &self.frame_hash).cmp(&(other.signal, &other.frame_hash))
    }
}

impl fmt::Display for CrashSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.signal, self.frame_hash)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashRecord {
    pub id: RecordId,
    pub input_hash: String,
    pub input_len: u64,
    pub component: String,
    pub applet: String,
    pub source_target_hash: String,
    pub source_version: Option<VersionInfo>,
    pub source_arch: Arch,
    pub discovery: Discovery,
    pub signal: CrashSignal,
    pub signature: Option<CrashSignature>,
    pub recorded_at: DateTime<Utc>,
    #[serde(default)]
    pub rev: u32,
}

/// Provenance supplied with a new crash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashMetadata {
    pub component: String,
    pub applet: String,
    pub source_target_hash: String,
    pub source_version: Option<VersionInfo>,
    pub source_arch: Arch,
    pub discovery: Discovery,
    pub signal: CrashSignal,
    pub signature: Option<CrashSignature>,
}

impl CrashMetadata {
    fn validate(&self) -> Result<(), StoreError> {
        for (name, v) in [
            ("component", &self.component),
            ("applet", &self.applet),
            ("source_target_hash", &self.source_target_hash),
        ] {
            if v.trim().is_empty() {
                return Err(StoreError::Validation(format!("{name} is required")));
            }
        }
        Ok(())
    }
}

/// Half-open version interval `[min, max_exclusive)`; either end may be open.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionRange {
    pub min: Option<VersionInfo>,
    pub max_exclusive: Option<VersionInfo>,
}

impl VersionRange {
    pub fn contains(&self, v: &VersionInfo) -> bool {
        self.min.as_ref().is_none_or(|m| v >= m)
            && self.max_exclusive.as_ref().is_none_or(|m| v < m)
    }
}

/// Conjunctive record filter; `None` fields match anything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashFilter {
    pub component: Option<String>,
    pub applet: Option<String>,
    pub version_range: Option<VersionRange>,
    pub arch: Option<Arch>,
    pub discovery: Option<Discovery>,
}

impl CrashFilter {
    pub fn matches(&self, r: &CrashRecord) -> bool {
        self.component.as_ref().is_none_or(|c| *c == r.component)
            && self.applet.as_ref().is_none_or(|a| *a == r.applet)
            && self.arch.is_none_or(|a| a == r.source_arch)
            && self.discovery.is_none_or(|d| d == r.discovery)
            && self.version_range.as_ref().is_none_or(|range| {
                r.source_version.as_ref().is_some_and(|v| range.contains(v))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ImportSummary {
    pub inserted: usize,
    pub existing: usize,
    pub skipped: usize,
}

pub struct CrashStore {
    root: PathBuf,
    records: RwLock<HashMap<RecordId, CrashRecord>>,
    writer: Mutex<File>,
}

impl CrashStore {
    /// Opens (creating if needed) the store rooted at `root`.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        let blobs = root.join(BLOB_DIR);
        fs::create_dir_all(&blobs).map_err(io_err(&blobs))?;
        let index = root.join(INDEX_FILE);
        let records = load_index(&index)?;
        let writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&index)
            .map_err(io_err(&index))?;
        Ok(CrashStore {
            root,
            records: RwLock::new(records),
            writer: Mutex::new(writer),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.records.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of distinct blobs on disk.
    pub fn blob_count(&self) -> Result<usize, StoreError> {
        let dir = self.root.join(BLOB_DIR);
        Ok(fs::read_dir(&dir).map_err(io_err(&dir))?.count())
    }

    fn blob_path(&self, hash: &str) -> PathBuf {
        self.root.join(BLOB_DIR).join(hash)
    }

    /// Stores `input` with `meta`. Re-inserting the same input for the same
    /// source target returns the existing id; the flag says whether a new
    /// record was written.
    pub fn insert(&self, input: &[u8], meta: CrashMetadata) -> Result<(RecordId, bool), StoreError> {
        if input.is_empty() {
            return Err(StoreError::Validation("crash input is empty".into()));
        }
        meta.validate()?;
        let input_hash = sha256_hex(input);
        let id = RecordId::for_key(&input_hash, &meta.source_target_hash);

        let mut writer = self.writer.lock().unwrap();
        if self.records.read().unwrap().contains_key(&id) {
            return Ok((id, false));
        }
        self.write_blob(&input_hash, input)?;
        let record = CrashRecord {
            id: id.clone(),
            input_hash,
            input_len: input.len() as u64,
            component: meta.component,
            applet: meta.applet,
            source_target_hash: meta.source_target_hash,
            source_version: meta.source_version,
            source_arch: meta.source_arch,
            discovery: meta.discovery,
            signal: meta.signal,
            signature: meta.signature,
            recorded_at: Utc::now(),
            rev: 0,
        };
        self.append(&mut writer, &record)?;
        self.records.write().unwrap().insert(id.clone(), record);
        Ok((id, true))
    }

    fn write_blob(&self, hash: &str, bytes: &[u8]) -> Result<(), StoreError> {
        let path = self.blob_path(hash);
        if path.exists() {
            return Ok(());
        }
        let tmp = self.root.join(BLOB_DIR).join(format!(".{hash}.tmp"));
        fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    fn append(&self, writer: &mut File, record: &CrashRecord) -> Result<(), StoreError> {
        let mut line = serde_json::to_string(record).expect("record serializes");
        line.push('\n');
        let index = self.root.join(INDEX_FILE);
        writer.write_all(line.as_bytes()).map_err(io_err(&index))?;
        writer.flush().map_err(io_err(&index))
    }

    /// Attaches a signature to a record that has none. Attaching an equal
    /// signature again is a no-op.
    pub fn attach_signature(&self, id: &RecordId, signature: CrashSignature) -> Result<(), StoreError> {
        let mut writer = self.writer.lock().unwrap();
        let mut record = self
            .records
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::UnknownRecord(id.clone()))?;
        match &record.signature {
            Some(existing) if *existing == signature => return Ok(()),
            Some(_) => return Err(StoreError::AlreadySigned(id.clone())),
            None => {}
        }
        record.signature = Some(signature);
        record.rev += 1;
        self.append(&mut writer, &record)?;
        self.records.write().unwrap().insert(id.clone(), record);
        Ok(())
    }

    pub fn get(&self, id: &RecordId) -> Option<CrashRecord> {
        self.records.read().unwrap().get(id).cloned()
    }

    /// Records matching `filter`, ordered by `(recorded_at, input_hash)`.
    pub fn query(&self, filter: &CrashFilter) -> Vec<CrashRecord> {
        let mut out: Vec<CrashRecord> = self
            .records
            .read()
            .unwrap()
            .values()
            .filter(|r| filter.matches(r))
            .cloned()
            .collect();
        out.sort_by(|a, b| {
            (a.recorded_at, &a.input_hash, &a.source_target_hash)
                .cmp(&(b.recorded_at, &b.input_hash, &b.source_target_hash))
        });
        out
    }

    /// Blob contents, checked against the hash.
    pub fn blob(&self, input_hash: &str) -> Result<Vec<u8>, StoreError> {
        let bytes = fs::read(self.blob_path(input_hash))
            .map_err(|_| StoreError::BadBlob(input_hash.to_string()))?;
        if sha256_hex(&bytes) != input_hash {
            return Err(StoreError::BadBlob(input_hash.to_string()));
        }
        Ok(bytes)
    }

    /// Ingests every file of a fuzzer `crashes/` directory. The signal is
    /// read from AFL-style names (`id:000000,sig:11,...`) when present.
    pub fn import_crash_dir(&self, dir: &Path, template: &CrashMetadata) -> Result<ImportSummary, StoreError> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(Result::ok)
            .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
            .map(|e| e.path())
            .filter(|p| p.file_name().is_some_and(|n| n != "README.txt"))
            .collect();
        paths.sort();
        let mut summary = ImportSummary::default();
        for path in paths {
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            if bytes.is_empty() {
                summary.skipped += 1;
                continue;
            }
            let mut meta = template.clone();
            meta.discovery = Discovery::Fuzzing;
            if let Some(sig) = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(afl_name_signal)
            {
                meta.signal = sig;
            }
            match self.insert(&bytes, meta)? {
                (_, true) => summary.inserted += 1,
                (_, false) => summary.existing += 1,
            }
        }
        Ok(summary)
    }
}

fn afl_name_signal(name: &str) -> Option<CrashSignal> {
    name.split(',')
        .find_map(|part| part.strip_prefix("sig:"))
        .and_then(|n| n.parse().ok())
        .map(CrashSignal::from_raw)
}

fn load_index(path: &Path) -> Result<HashMap<RecordId, CrashRecord>, StoreError> {
    let mut records: HashMap<RecordId, CrashRecord> = HashMap::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(records),
        Err(e) => return Err(io_err(path)(e)),
    };
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(io_err(path))?;
    let last = lines.len();
    for (n, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CrashRecord>(line) {
            Ok(r) => {
                let newer = records.get(&r.id).is_none_or(|old| r.rev >= old.rev);
                if newer {
                    records.insert(r.id.clone(), r);
                }
            }
            // a torn final line from an interrupted append
            Err(e) if n + 1 == last => warn!("ignoring incomplete last index line: {e}"),
            Err(e) => {
                return Err(StoreError::CorruptIndex {
                    line: n + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(records)
}

/// Records grouped by signature, plus those without one.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UniqueGroups {
    pub groups: BTreeMap<CrashSignature, Vec<RecordId>>,
    pub unsigned: Vec<RecordId>,
}

impl UniqueGroups {
    /// The "unique crashes" count.
    pub fn unique_count(&self) -> usize {
        self.groups.len()
    }
}

pub fn unique_groups(records: &[CrashRecord]) -> UniqueGroups {
    let mut out = UniqueGroups::default();
    for r in records {
        match &r.signature {
            Some(sig) => out.groups.entry(sig.clone()).or_default().push(r.id.clone()),
            None => out.unsigned.push(r.id.clone()),
        }
    }
    out
}

//! LostPeople and FoundPeople directories backed by an append-only event log.
//!
//! Layout of a data directory:
//!
//! ```text
//! entries.log        one JSON event per line: created | status | matched
//! blobs/<sha256>     original photo bytes
//! ```
//!
//! The log is replayed into an in-memory index on open. All mutations go
//! through a [`StoreWriter`], of which at most one exists at a time; readers
//! take short read locks on the index and never block on a running writer for
//! longer than one event application.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Mutex, MutexGuard, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingVector, FaceImage, ImageFormat};
use crate::jsonl::{self, JsonlError, JsonlWriter};

pub const ENTRIES_LOG: &str = "entries.log";
pub const BLOB_DIR: &str = "blobs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntryId(pub u64);

impl fmt::Display for EntryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl FromStr for EntryId {
    type Err = std::num::ParseIntError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse().map(EntryId)
    }
}

/// Which directory an entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Side {
    /// Filed by a family member; lives in LostPeople.
    Missing,
    /// Filed by a finder; lives in FoundPeople.
    Finding,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Missing => Side::Finding,
            Side::Finding => Side::Missing,
        }
    }

    pub fn directory(self) -> &'static str {
        match self {
            Side::Missing => "LostPeople",
            Side::Finding => "FoundPeople",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Missing => "MISSING",
            Side::Finding => "FINDING",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Side {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "MISSING" => Ok(Side::Missing),
            "FINDING" => Ok(Side::Finding),
            _ => Err(format!("unknown side {s:?}, expected missing or finding")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntryStatus {
    /// Administrative processing: waiting for police verification.
    #[serde(rename = "AP")]
    Ap,
    #[serde(rename = "ACTIVE")]
    Active,
    #[serde(rename = "MATCHED")]
    Matched,
    #[serde(rename = "REJECTED")]
    Rejected,
}

impl EntryStatus {
    pub fn can_transition_to(self, to: EntryStatus) -> bool {
        use EntryStatus::*;
        matches!((self, to), (Ap, Active) | (Ap, Rejected) | (Active, Matched))
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, EntryStatus::Matched | EntryStatus::Rejected)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EntryStatus::Ap => "AP",
            EntryStatus::Active => "ACTIVE",
            EntryStatus::Matched => "MATCHED",
            EntryStatus::Rejected => "REJECTED",
        }
    }
}

impl fmt::Display for EntryStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Who filed an entry and where they are registered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UploaderInfo {
    pub name: String,
    pub nid: String,
    pub phone: String,
    pub email: String,
    pub address: String,
    pub police_station_id: String,
}

impl UploaderInfo {
    pub fn validate(&self) -> Result<(), RegistryError> {
        let blank = [
            ("nid", &self.nid),
            ("phone", &self.phone),
            ("email", &self.email),
            ("police_station_id", &self.police_station_id),
        ]
        .into_iter()
        .find(|(_, v)| v.trim().is_empty());
        if let Some((field, _)) = blank {
            return Err(RegistryError::InvalidUploader(format!("{field} must not be empty")));
        }
        if !self.email.contains('@') {
            return Err(RegistryError::InvalidUploader("email must contain '@'".into()));
        }
        Ok(())
    }
}

/// One missing or finding record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub id: EntryId,
    pub side: Side,
    pub uploader: UploaderInfo,
    pub subject_name: String,
    pub photo: FaceImage,
    pub embedding: EmbeddingVector,
    pub status: EntryStatus,
    pub matched_entry_id: Option<EntryId>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl Entry {
    /// Sort key for "earliest first": creation time, then id.
    pub fn age_key(&self) -> (DateTime<Utc>, EntryId) {
        (self.created_at, self.id)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("entry {0} already exists")]
    DuplicateId(EntryId),
    #[error("unknown entry {0}")]
    UnknownEntry(EntryId),
    #[error("illegal transition of entry {id} from {from} to {to}")]
    IllegalTransition {
        id: EntryId,
        from: EntryStatus,
        to: EntryStatus,
    },
    #[error("entries {0} and {1} are in the same directory")]
    SameDirectoryLink(EntryId, EntryId),
    #[error("invalid entry: {0}")]
    InvalidEntry(String),
    #[error("invalid uploader info: {0}")]
    InvalidUploader(String),
    #[error("storage failure: {0}")]
    Storage(String),
}

impl From<JsonlError> for RegistryError {
    fn from(e: JsonlError) -> Self {
        RegistryError::Storage(e.to_string())
    }
}

impl From<std::io::Error> for RegistryError {
    fn from(e: std::io::Error) -> Self {
        RegistryError::Storage(e.to_string())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PhotoRef {
    format: ImageFormat,
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CreatedRecord {
    id: EntryId,
    side: Side,
    uploader: UploaderInfo,
    subject_name: String,
    photo: PhotoRef,
    embedding: EmbeddingVector,
    status: EntryStatus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
enum LogEvent {
    Created {
        at: DateTime<Utc>,
        entry: CreatedRecord,
    },
    Status {
        at: DateTime<Utc>,
        id: EntryId,
        from: EntryStatus,
        to: EntryStatus,
    },
    Matched {
        at: DateTime<Utc>,
        a: EntryId,
        b: EntryId,
    },
}

#[derive(Debug, Default)]
struct Index {
    entries: BTreeMap<EntryId, Entry>,
}

impl Index {
    fn get(&self, id: EntryId) -> Result<&Entry, RegistryError> {
        self.entries.get(&id).ok_or(RegistryError::UnknownEntry(id))
    }

    fn active(&self, side: Side) -> Vec<Entry> {
        let mut out: Vec<Entry> = self
            .entries
            .values()
            .filter(|e| e.side == side && e.status == EntryStatus::Active)
            .cloned()
            .collect();
        out.sort_by_key(Entry::age_key);
        out
    }

    fn next_id(&self) -> EntryId {
        EntryId(self.entries.keys().next_back().map_or(1, |id| id.0 + 1))
    }

    fn check_transition(&self, id: EntryId, to: EntryStatus) -> Result<EntryStatus, RegistryError> {
        let from = self.get(id)?.status;
        // MATCHED is only reachable through a link
        if !from.can_transition_to(to) || to == EntryStatus::Matched {
            return Err(RegistryError::IllegalTransition { id, from, to });
        }
        Ok(from)
    }

    fn check_link(&self, a: EntryId, b: EntryId) -> Result<(), RegistryError> {
        let (ea, eb) = (self.get(a)?, self.get(b)?);
        if ea.side == eb.side {
            return Err(RegistryError::SameDirectoryLink(a, b));
        }
        for e in [ea, eb] {
            if e.status != EntryStatus::Active {
                return Err(RegistryError::IllegalTransition {
                    id: e.id,
                    from: e.status,
                    to: EntryStatus::Matched,
                });
            }
        }
        Ok(())
    }

    fn apply(&mut self, event: LogEvent, blobs: &Path) -> Result<(), RegistryError> {
        match event {
            LogEvent::Created { at, entry } => {
                if self.entries.contains_key(&entry.id) {
                    return Err(RegistryError::DuplicateId(entry.id));
                }
                let payload = fs::read(blobs.join(&entry.photo.sha256))?;
                self.entries.insert(
                    entry.id,
                    Entry {
                        id: entry.id,
                        side: entry.side,
                        uploader: entry.uploader,
                        subject_name: entry.subject_name,
                        photo: FaceImage::new(entry.photo.format, payload),
                        embedding: entry.embedding,
                        status: entry.status,
                        matched_entry_id: None,
                        created_at: at,
                        updated_at: at,
                    },
                );
            }
            LogEvent::Status { at, id, to, .. } => {
                self.check_transition(id, to)?;
                let e = self.entries.get_mut(&id).expect("checked");
                e.status = to;
                e.updated_at = at;
            }
            LogEvent::Matched { at, a, b } => {
                self.check_link(a, b)?;
                for (me, other) in [(a, b), (b, a)] {
                    let e = self.entries.get_mut(&me).expect("checked");
                    e.status = EntryStatus::Matched;
                    e.matched_entry_id = Some(other);
                    e.updated_at = at;
                }
            }
        }
        Ok(())
    }
}

/// Read access to the active pools of both directories.
///
/// The matching code is written against this trait so that tests can observe
/// which directory a search touches.
pub trait CandidateSource {
    /// ACTIVE entries of one directory, oldest first (ties by id).
    fn active_entries(&self, side: Side) -> Result<Vec<Entry>, RegistryError>;
}

#[derive(Debug)]
pub struct EntryStore {
    dir: PathBuf,
    index: RwLock<Index>,
    writer: Mutex<JsonlWriter>,
}

impl EntryStore {
    /// Opens (or creates) a store rooted at `dir` and replays its log.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, RegistryError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(dir.join(BLOB_DIR))?;
        let log_path = dir.join(ENTRIES_LOG);
        let mut index = Index::default();
        let blobs = dir.join(BLOB_DIR);
        for event in jsonl::replay::<LogEvent>(&log_path)? {
            index.apply(event, &blobs)?;
        }
        let writer = JsonlWriter::open(&log_path)?;
        Ok(Self {
            dir,
            index: RwLock::new(index),
            writer: Mutex::new(writer),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Acquires the single writer context. Blocks while another writer is live.
    pub fn writer(&self) -> StoreWriter<'_> {
        StoreWriter {
            store: self,
            log: self.writer.lock().unwrap_or_else(|p| p.into_inner()),
        }
    }

    pub fn get_entry(&self, id: EntryId) -> Option<Entry> {
        self.read().entries.get(&id).cloned()
    }

    /// Every entry regardless of status, by id.
    pub fn entries(&self) -> Vec<Entry> {
        self.read().entries.values().cloned().collect()
    }

    pub fn active_entries(&self, side: Side) -> Vec<Entry> {
        self.read().active(side)
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Index> {
        self.index.read().unwrap_or_else(|p| p.into_inner())
    }

    fn write_blob(&self, photo: &FaceImage) -> Result<String, RegistryError> {
        let hash = photo.sha256();
        let path = self.dir.join(BLOB_DIR).join(&hash);
        if !path.exists() {
            let mut tmp = tempfile::NamedTempFile::new_in(self.dir.join(BLOB_DIR))?;
            tmp.write_all(&photo.payload)?;
            tmp.as_file().sync_all()?;
            tmp.persist(&path).map_err(|e| RegistryError::Storage(e.to_string()))?;
        }
        Ok(hash)
    }
}

impl CandidateSource for EntryStore {
    fn active_entries(&self, side: Side) -> Result<Vec<Entry>, RegistryError> {
        Ok(EntryStore::active_entries(self, side))
    }
}

/// Exclusive mutation handle. Reads through it observe every write made
/// through it, so check-then-act sequences are atomic.
pub struct StoreWriter<'a> {
    store: &'a EntryStore,
    log: MutexGuard<'a, JsonlWriter>,
}

impl StoreWriter<'_> {
    /// Next unused entry id.
    pub fn next_id(&self) -> EntryId {
        self.store.read().next_id()
    }

    pub fn get_entry(&self, id: EntryId) -> Result<Entry, RegistryError> {
        self.store.read().get(id).cloned()
    }

    fn commit(&mut self, event: LogEvent) -> Result<(), RegistryError> {
        self.log.append(&event)?;
        let blobs = self.store.dir.join(BLOB_DIR);
        let mut index = self.store.index.write().unwrap_or_else(|p| p.into_inner());
        index.apply(event, &blobs)
    }

    /// Durably appends a new entry. Only AP, ACTIVE and REJECTED entries
    /// without a match link can be stored directly.
    pub fn store_entry(&mut self, entry: Entry) -> Result<EntryId, RegistryError> {
        if self.store.read().entries.contains_key(&entry.id) {
            return Err(RegistryError::DuplicateId(entry.id));
        }
        entry.uploader.validate()?;
        if entry.status == EntryStatus::Matched || entry.matched_entry_id.is_some() {
            return Err(RegistryError::InvalidEntry(
                "matched entries are created through link_matched".into(),
            ));
        }
        if entry.photo.payload.is_empty() {
            return Err(RegistryError::InvalidEntry("photo payload is empty".into()));
        }
        let sha256 = self.store.write_blob(&entry.photo)?;
        let id = entry.id;
        self.commit(LogEvent::Created {
            at: entry.created_at,
            entry: CreatedRecord {
                id,
                side: entry.side,
                uploader: entry.uploader,
                subject_name: entry.subject_name,
                photo: PhotoRef {
                    format: entry.photo.format,
                    sha256,
                },
                embedding: entry.embedding,
                status: entry.status,
            },
        })?;
        Ok(id)
    }

    pub fn transition_status(&mut self, id: EntryId, to: EntryStatus) -> Result<Entry, RegistryError> {
        let from = self.store.read().check_transition(id, to)?;
        self.commit(LogEvent::Status {
            at: Utc::now(),
            id,
            from,
            to,
        })?;
        self.get_entry(id)
    }

    /// Marks both entries MATCHED with reciprocal links in a single event.
    pub fn link_matched(&mut self, a: EntryId, b: EntryId) -> Result<(Entry, Entry), RegistryError> {
        self.store.read().check_link(a, b)?;
        self.commit(LogEvent::Matched { at: Utc::now(), a, b })?;
        Ok((self.get_entry(a)?, self.get_entry(b)?))
    }
}

impl CandidateSource for StoreWriter<'_> {
    fn active_entries(&self, side: Side) -> Result<Vec<Entry>, RegistryError> {
        Ok(self.store.read().active(side))
    }
}

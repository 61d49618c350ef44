//! Checkpointing for pipeline runs.
//!
//! Each image gets a state file (which levels finished, plus the record's
//! content hash) and a record file. Writes go through a temp file and an
//! atomic rename, state first, record second; a crash between the two
//! leaves a hash mismatch that resume detects, and the image is simply
//! recomputed. Completed-level sets are downward closed: level n is never
//! marked done without 1..n-1.

use crate::grand::GrandRecord;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageState {
    pub image_id: String,
    /// Sorted, contiguous from 1.
    pub completed_levels: Vec<u8>,
    /// SHA-256 of the record's canonical bytes.
    pub record_hash: String,
    /// Unix seconds; informational only, never part of record hashes.
    pub updated_at: u64,
}

impl StageState {
    pub fn has_level(&self, level: u8) -> bool {
        self.completed_levels.contains(&level)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{op} {path}: {source}")]
    Io { op: &'static str, path: PathBuf, source: io::Error },
    #[error("parse {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("levels {0:?} are not contiguous from 1")]
    NonContiguousLevels(Vec<u8>),
}

pub struct CheckpointStore {
    states: PathBuf,
    records: PathBuf,
}

/// Stable filename for an arbitrary image id: a readable prefix plus a
/// short content hash so exotic ids cannot collide or escape the dir.
fn file_stem(image_id: &str) -> String {
    let safe: String = image_id
        .chars()
        .take(40)
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect();
    let mut h = Sha256::new();
    h.update(image_id.as_bytes());
    let digest = h.finalize();
    let tag: String = digest[..4].iter().map(|b| format!("{b:02x}")).collect();
    format!("{safe}-{tag}")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)
        .map_err(|e| StoreError::Io { op: "write", path: tmp.clone(), source: e })?;
    fs::rename(&tmp, path)
        .map_err(|e| StoreError::Io { op: "rename", path: path.to_path_buf(), source: e })
}

fn hash_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl CheckpointStore {
    /// # Errors
    /// `Io` when the store directories cannot be created.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let states = root.join("states");
        let records = root.join("records");
        for dir in [&states, &records] {
            fs::create_dir_all(dir)
                .map_err(|e| StoreError::Io { op: "create", path: dir.clone(), source: e })?;
        }
        Ok(CheckpointStore { states, records })
    }

    fn state_path(&self, image_id: &str) -> PathBuf {
        self.states.join(format!("{}.json", file_stem(image_id)))
    }

    fn record_path(&self, image_id: &str) -> PathBuf {
        self.records.join(format!("{}.json", file_stem(image_id)))
    }

    /// Persists a record with the given completed levels. State goes to
    /// disk before the record; the state's hash covers the new record.
    ///
    /// # Errors
    /// `NonContiguousLevels` unless levels are exactly 1..=n; `Io` on any
    /// filesystem failure.
    pub fn save(&self, record: &GrandRecord, levels: &[u8]) -> Result<StageState, StoreError> {
        let mut sorted = levels.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let contiguous = sorted.iter().enumerate().all(|(i, &l)| l == i as u8 + 1);
        if sorted.is_empty() || !contiguous {
            return Err(StoreError::NonContiguousLevels(levels.to_vec()));
        }
        let bytes = record.to_canonical_bytes();
        let state = StageState {
            image_id: record.image_id.clone(),
            completed_levels: sorted,
            record_hash: hash_bytes(&bytes),
            updated_at: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        let state_bytes = serde_json::to_vec(&state).expect("states serialize");
        write_atomic(&self.state_path(&record.image_id), &state_bytes)?;
        write_atomic(&self.record_path(&record.image_id), &bytes)?;
        Ok(state)
    }

    /// State file alone, without consistency checks.
    ///
    /// # Errors
    /// `Io` on unreadable files, `Json` on corrupt ones.
    pub fn load_state(&self, image_id: &str) -> Result<Option<StageState>, StoreError> {
        let path = self.state_path(image_id);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(StoreError::Io { op: "read", path, source: e }),
        };
        let state = serde_json::from_str(&text).map_err(|e| StoreError::Json { path, source: e })?;
        Ok(Some(state))
    }

    /// The verified checkpoint for an image: state plus record whose bytes
    /// hash to what the state recorded. Any missing half or hash mismatch
    /// (a torn write) yields `None`, telling the caller to recompute.
    ///
    /// # Errors
    /// `Io`/`Json` on unreadable or unparseable files.
    pub fn load_verified(
        &self,
        image_id: &str,
    ) -> Result<Option<(StageState, GrandRecord)>, StoreError> {
        let Some(state) = self.load_state(image_id)? else { return Ok(None) };
        let path = self.record_path(image_id);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(StoreError::Io { op: "read", path, source: e }),
        };
        if hash_bytes(&bytes) != state.record_hash {
            return Ok(None);
        }
        let record: GrandRecord =
            serde_json::from_slice(&bytes).map_err(|e| StoreError::Json { path, source: e })?;
        Ok(Some((state, record)))
    }

    /// Image ids with any stored state, sorted.
    ///
    /// # Errors
    /// `Io`/`Json` on unreadable or unparseable state files.
    pub fn list_image_ids(&self) -> Result<Vec<String>, StoreError> {
        let mut ids = Vec::new();
        let entries = fs::read_dir(&self.states)
            .map_err(|e| StoreError::Io { op: "read", path: self.states.clone(), source: e })?;
        for entry in entries {
            let entry = entry
                .map_err(|e| StoreError::Io { op: "read", path: self.states.clone(), source: e })?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let text = fs::read_to_string(&path)
                .map_err(|e| StoreError::Io { op: "read", path: path.clone(), source: e })?;
            let state: StageState =
                serde_json::from_str(&text).map_err(|e| StoreError::Json { path, source: e })?;
            ids.push(state.image_id);
        }
        ids.sort();
        Ok(ids)
    }
}

//! Per-sample status ledger and its write-ahead journal.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::records::{EditSample, Part};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntryStatus {
    Pending,
    Done,
    Failed,
    FilteredOut,
}

impl EntryStatus {
    pub const ALL: [EntryStatus; 4] = [
        EntryStatus::Pending,
        EntryStatus::Done,
        EntryStatus::Failed,
        EntryStatus::FilteredOut,
    ];

    pub fn is_terminal(self) -> bool {
        self != EntryStatus::Pending
    }

    pub fn label(self) -> &'static str {
        match self {
            EntryStatus::Pending => "Pending",
            EntryStatus::Done => "Done",
            EntryStatus::Failed => "Failed",
            EntryStatus::FilteredOut => "FilteredOut",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub status: EntryStatus,
    pub part: Part,
    pub source_id: String,
    pub cache_keys: Vec<String>,
    pub warnings: Vec<String>,
    /// Failure or filter reason, `kind` or `kind: detail`.
    pub reason: Option<String>,
}

impl ManifestEntry {
    pub fn pending(part: Part, source_id: impl Into<String>) -> Self {
        ManifestEntry {
            status: EntryStatus::Pending,
            part,
            source_id: source_id.into(),
            cache_keys: Vec::new(),
            warnings: Vec::new(),
            reason: None,
        }
    }

    /// The part of `reason` before the first colon.
    pub fn reason_kind(&self) -> Option<&str> {
        self.reason.as_deref().map(|r| r.split(':').next().unwrap_or(r).trim())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub run_id: String,
    pub created_at: String,
    pub updated_at: String,
    pub config_hash: String,
    pub entries: BTreeMap<String, ManifestEntry>,
    pub part_counts: BTreeMap<Part, usize>,
    /// Shard files relative to the output directory.
    pub shards: Vec<String>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

impl PipelineManifest {
    pub fn new(config_hash: impl Into<String>) -> Self {
        let stamp = now();
        PipelineManifest {
            run_id: uuid::Uuid::new_v4().to_string(),
            created_at: stamp.clone(),
            updated_at: stamp,
            config_hash: config_hash.into(),
            entries: BTreeMap::new(),
            part_counts: Part::ALL.iter().map(|p| (*p, 0)).collect(),
            shards: Vec::new(),
        }
    }

    /// Adds a Pending entry unless the id is already known.
    pub fn register(&mut self, id: &str, part: Part, source_id: &str) {
        self.entries
            .entry(id.to_string())
            .or_insert_with(|| ManifestEntry::pending(part, source_id));
    }

    /// Moves an entry to a terminal status. Only `Pending → terminal` is
    /// allowed; re-applying the identical terminal entry is a no-op.
    pub fn transition(&mut self, id: &str, next: ManifestEntry) -> Result<(), PipelineError> {
        let current = self
            .entries
            .get_mut(id)
            .ok_or_else(|| PipelineError::Manifest(format!("unknown sample id {id:?}")))?;
        if !next.status.is_terminal() {
            return Err(PipelineError::Manifest(format!("{id}: cannot move back to Pending")));
        }
        match current.status {
            EntryStatus::Pending => {
                *current = next;
                self.recount();
                Ok(())
            }
            _ if *current == next => Ok(()),
            status => Err(PipelineError::Manifest(format!(
                "{id}: illegal transition {} -> {}",
                status.label(),
                next.status.label()
            ))),
        }
    }

    pub fn recount(&mut self) {
        let mut counts: BTreeMap<Part, usize> = Part::ALL.iter().map(|p| (*p, 0)).collect();
        for entry in self.entries.values().filter(|e| e.status == EntryStatus::Done) {
            *counts.entry(entry.part).or_default() += 1;
        }
        self.part_counts = counts;
    }

    pub fn status_counts(&self) -> BTreeMap<EntryStatus, usize> {
        let mut counts: BTreeMap<EntryStatus, usize> = EntryStatus::ALL.iter().map(|s| (*s, 0)).collect();
        for entry in self.entries.values() {
            *counts.entry(entry.status).or_default() += 1;
        }
        counts
    }

    pub fn pending(&self) -> usize {
        self.entries.values().filter(|e| e.status == EntryStatus::Pending).count()
    }

    pub fn failed(&self) -> usize {
        self.entries.values().filter(|e| e.status == EntryStatus::Failed).count()
    }

    /// Checks that `part_counts` matches the Done entries.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut copy = self.clone();
        copy.recount();
        if copy.part_counts != self.part_counts {
            return Err(PipelineError::Manifest(format!(
                "part_counts {:?} do not match Done entries {:?}",
                self.part_counts, copy.part_counts
            )));
        }
        Ok(())
    }

    /// JSON with `run_id` and the timestamps removed, for comparing runs.
    pub fn comparable_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("manifest serializes");
        if let Some(map) = value.as_object_mut() {
            for key in ["run_id", "created_at", "updated_at"] {
                map.remove(key);
            }
        }
        serde_json::to_string_pretty(&value).expect("manifest serializes")
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let manifest: PipelineManifest = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Manifest(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    /// Writes the manifest atomically.
    pub fn save(&mut self, path: &Path) -> Result<(), PipelineError> {
        self.updated_at = now();
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let tmp = path.with_extension("tmp");
    let mut file = File::create(&tmp).map_err(|e| PipelineError::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| PipelineError::io(&tmp, e))?;
    file.sync_all().map_err(|e| PipelineError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
}

/// One journal line: the terminal entry of a sample and, when Done, the
/// sample itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub id: String,
    pub entry: ManifestEntry,
    pub sample: Option<EditSample>,
}

/// Append-only JSON-lines log of terminal sample outcomes, synced after
/// every record.
#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    pub fn open(path: &Path) -> Result<Self, PipelineError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| PipelineError::io(path, e))?;
        Ok(Journal {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, record: &JournalRecord) -> Result<(), PipelineError> {
        let mut line = serde_json::to_string(record).expect("journal record serializes");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.sync_data())
            .map_err(|e| PipelineError::io(&self.path, e))
    }

    /// Reads every complete record. A torn final line (a crash mid-write) is
    /// dropped and truncated away; a bad line anywhere else is an error.
    pub fn replay(path: &Path) -> Result<Vec<JournalRecord>, PipelineError> {
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(PipelineError::io(path, e)),
        };
        let mut records = Vec::new();
        let mut valid_len = 0u64;
        let mut lines = BufReader::new(file).split(b'\n').enumerate().peekable();
        while let Some((idx, line)) = lines.next() {
            let line = line.map_err(|e| PipelineError::io(path, e))?;
            let is_last = lines.peek().is_none();
            match serde_json::from_slice::<JournalRecord>(&line) {
                Ok(record) => {
                    records.push(record);
                    valid_len += line.len() as u64 + 1;
                }
                Err(_) if line.iter().all(u8::is_ascii_whitespace) => valid_len += line.len() as u64 + 1,
                Err(_) if is_last => {
                    log::warn!("{}: dropping torn final line {}", path.display(), idx + 1);
                    let file = OpenOptions::new().write(true).open(path).map_err(|e| PipelineError::io(path, e))?;
                    file.set_len(valid_len).map_err(|e| PipelineError::io(path, e))?;
                }
                Err(e) => {
                    return Err(PipelineError::Manifest(format!(
                        "{}: line {}: {e}",
                        path.display(),
                        idx + 1
                    )))
                }
            }
        }
        Ok(records)
    }
}

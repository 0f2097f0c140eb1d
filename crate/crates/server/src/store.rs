//! In-memory session store with an optional JSON Lines journal.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use dashmap::DashMap;
use serde::{Deserialize, Serialize};

use soliloquy_core::api::SessionHandle;
use soliloquy_core::backend::ChatBackend;
use soliloquy_core::Session;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEntry {
    pub handle: SessionHandle,
    pub session: Session,
}

/// One live session. The mutex is held for the whole of a step, so a
/// second message arriving meanwhile sees it locked.
pub struct Slot {
    pub entry: tokio::sync::Mutex<SessionEntry>,
    pub backend: Arc<dyn ChatBackend>,
}

#[derive(Default)]
pub struct SessionStore {
    slots: DashMap<String, Arc<Slot>>,
}

impl SessionStore {
    pub fn insert(&self, entry: SessionEntry, backend: Arc<dyn ChatBackend>) -> Arc<Slot> {
        let id = entry.handle.session_id.clone();
        let slot = Arc::new(Slot {
            entry: tokio::sync::Mutex::new(entry),
            backend,
        });
        self.slots.insert(id, slot.clone());
        slot
    }

    pub fn get(&self, id: &str) -> Option<Arc<Slot>> {
        self.slots.get(id).map(|s| s.value().clone())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Append-only snapshots; the last line for a session id wins.
pub struct SessionJournal {
    path: PathBuf,
    out: Mutex<BufWriter<File>>,
}

impl SessionJournal {
    pub fn open(path: impl Into<PathBuf>) -> std::io::Result<Self> {
        let path = path.into();
        let file = std::fs::OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            out: Mutex::new(BufWriter::new(file)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, entry: &SessionEntry) -> std::io::Result<()> {
        let line = serde_json::to_string(entry)?;
        let mut out = self.out.lock().unwrap();
        writeln!(out, "{line}")?;
        out.flush()
    }

    /// Latest snapshot per session, in order of first appearance. A torn
    /// final line (crash mid-write) is skipped.
    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Vec<SessionEntry>> {
        let file = match File::open(path.as_ref()) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>()?;
        let mut order = Vec::new();
        let mut latest: HashMap<String, SessionEntry> = HashMap::new();
        let last = lines.len().saturating_sub(1);
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: SessionEntry = match serde_json::from_str(line) {
                Ok(e) => e,
                Err(e) if i == last => {
                    tracing::warn!(line = i + 1, "skipping torn journal line: {e}");
                    continue;
                }
                Err(e) => {
                    return Err(std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        format!("journal line {}: {e}", i + 1),
                    ))
                }
            };
            let id = entry.handle.session_id.clone();
            if !latest.contains_key(&id) {
                order.push(id.clone());
            }
            latest.insert(id, entry);
        }
        Ok(order.into_iter().filter_map(|id| latest.remove(&id)).collect())
    }
}

//! Scripted replies, fixture files, and record mode.
//!
//! Fixture files are JSON Lines, one exchange per line:
//! `{"fingerprint": "<sha256 hex or null>", "reply": "..."}`. Recorded
//! batches also carry `"session"` so that parallel sessions replay from
//! their own queues.

use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{
    check_messages, fingerprint, BackendError, BackendFactory, ChatBackend, ChatMessage,
    CompletionParams,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    #[serde(default)]
    pub fingerprint: Option<String>,
    pub reply: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
}

impl FixtureEntry {
    pub fn reply(reply: impl Into<String>) -> Self {
        Self {
            fingerprint: None,
            reply: reply.into(),
            session: None,
        }
    }
}

pub fn load_fixture(path: impl AsRef<Path>) -> Result<Vec<FixtureEntry>, BackendError> {
    let reader = BufReader::new(File::open(path)?);
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|e| BackendError::FixtureFormat {
            line: i + 1,
            message: e.to_string(),
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

#[derive(Debug, Default)]
struct Queue {
    pending: VecDeque<FixtureEntry>,
    consumed: usize,
}

/// Serves fixture replies strictly in order.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    queue: Mutex<Queue>,
}

impl ScriptedBackend {
    pub fn new(entries: impl IntoIterator<Item = FixtureEntry>) -> Self {
        Self {
            queue: Mutex::new(Queue {
                pending: entries.into_iter().collect(),
                consumed: 0,
            }),
        }
    }

    pub fn from_replies<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self::new(replies.into_iter().map(FixtureEntry::reply))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        Ok(Self::new(load_fixture(path)?))
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().unwrap().pending.len()
    }

    pub fn consumed(&self) -> usize {
        self.queue.lock().unwrap().consumed
    }
}

#[async_trait]
impl ChatBackend for ScriptedBackend {
    async fn complete(
        &self,
        messages: &[ChatMessage],
        _params: &CompletionParams,
    ) -> Result<String, BackendError> {
        check_messages(messages)?;
        let mut queue = self.queue.lock().unwrap();
        let position = queue.consumed;
        let Some(front) = queue.pending.front() else {
            return Err(BackendError::FixtureExhausted { consumed: position });
        };
        if let Some(expected) = &front.fingerprint {
            let actual = fingerprint(messages);
            if *expected != actual {
                return Err(BackendError::FingerprintMismatch {
                    position,
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        let entry = queue.pending.pop_front().expect("front checked");
        queue.consumed += 1;
        Ok(entry.reply)
    }
}

/// A fixture file split into per-session queues. Entries without a session
/// tag form the default queue, which serves any unknown session key.
#[derive(Debug, Default)]
pub struct ReplayLibrary {
    sessions: HashMap<String, Arc<ScriptedBackend>>,
    default: Arc<ScriptedBackend>,
}

impl ReplayLibrary {
    pub fn new(entries: impl IntoIterator<Item = FixtureEntry>) -> Self {
        let mut grouped: HashMap<String, Vec<FixtureEntry>> = HashMap::new();
        let mut default = Vec::new();
        for entry in entries {
            match &entry.session {
                Some(s) => grouped.entry(s.clone()).or_default().push(entry),
                None => default.push(entry),
            }
        }
        Self {
            sessions: grouped
                .into_iter()
                .map(|(k, v)| (k, Arc::new(ScriptedBackend::new(v))))
                .collect(),
            default: Arc::new(ScriptedBackend::new(default)),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        Ok(Self::new(load_fixture(path)?))
    }

    pub fn sessions(&self) -> impl Iterator<Item = &str> {
        self.sessions.keys().map(String::as_str)
    }
}

impl BackendFactory for ReplayLibrary {
    fn session_backend(&self, session: &str) -> Arc<dyn ChatBackend> {
        match self.sessions.get(session) {
            Some(b) => b.clone(),
            None => self.default.clone(),
        }
    }
}

/// Appends fixture entries to a JSON Lines file; one writer per file.
pub struct FixtureWriter {
    out: Mutex<BufWriter<File>>,
}

impl FixtureWriter {
    pub fn create(path: impl AsRef<Path>) -> std::io::Result<Self> {
        Ok(Self {
            out: Mutex::new(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn append(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            out: Mutex::new(BufWriter::new(file)),
        })
    }

    pub fn write(&self, entry: &FixtureEntry) -> std::io::Result<()> {
        let line = serde_json::to_string(entry)?;
        let mut out = self.out.lock().unwrap();
        writeln!(out, "{line}")?;
        out.flush()
    }
}

/// Passes requests through to `inner` and records every exchange.
pub struct RecordingBackend {
    inner: Arc<dyn ChatBackend>,
    writer: Arc<FixtureWriter>,
    session: Option<String>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn ChatBackend>, writer: Arc<FixtureWriter>) -> Self {
        Self {
            inner,
            writer,
            session: None,
        }
    }

    pub fn for_session(mut self, session: impl Into<String>) -> Self {
        self.session = Some(session.into());
        self
    }
}

#[async_trait]
impl ChatBackend for RecordingBackend {
    async fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<String, BackendError> {
        let reply = self.inner.complete(messages, params).await?;
        self.writer.write(&FixtureEntry {
            fingerprint: Some(fingerprint(messages)),
            reply: reply.clone(),
            session: self.session.clone(),
        })?;
        Ok(reply)
    }
}

/// Records every session of `inner`, tagging entries with the session key.
pub struct RecordingFactory {
    inner: Arc<dyn BackendFactory>,
    writer: Arc<FixtureWriter>,
}

impl RecordingFactory {
    pub fn new(inner: Arc<dyn BackendFactory>, writer: Arc<FixtureWriter>) -> Self {
        Self { inner, writer }
    }
}

impl BackendFactory for RecordingFactory {
    fn session_backend(&self, session: &str) -> Arc<dyn ChatBackend> {
        Arc::new(
            RecordingBackend::new(self.inner.session_backend(session), self.writer.clone())
                .for_session(session),
        )
    }
}

//! Chat-completion backends.
//!
//! The engine talks to a [`ChatBackend`] and never learns which kind it got:
//! a live HTTP endpoint, a replay of recorded replies, or the rule-based
//! simulator used for offline runs.

mod http;
mod replay;
mod simulated;

use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use http::{HttpBackend, HttpConfig, RetryPolicy};
pub use replay::{
    load_fixture, FixtureEntry, FixtureWriter, RecordingBackend, RecordingFactory, ReplayLibrary,
    ScriptedBackend,
};
pub use simulated::SimulatedBackend;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl CompletionParams {
    pub const MAX_TEMPERATURE: f64 = 2.0;

    /// Student role: higher temperature for varied replies.
    pub fn student_default() -> Self {
        Self {
            model: "gpt-4".into(),
            temperature: 0.7,
            max_tokens: 512,
            seed: None,
        }
    }

    /// Tutorbot soliloquy states: low temperature for schema stability.
    pub fn tutor_default() -> Self {
        Self {
            model: "gpt-4".into(),
            temperature: 0.2,
            max_tokens: 1024,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(0.0..=Self::MAX_TEMPERATURE).contains(&self.temperature) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.model.is_empty() {
            return Err(BackendError::InvalidRequest("empty model id".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("replay fixture exhausted after {consumed} repl(ies)")]
    FixtureExhausted { consumed: usize },
    #[error("request {position} does not match the recorded fingerprint (expected {expected}, got {actual})")]
    FingerprintMismatch {
        position: usize,
        expected: String,
        actual: String,
    },
    #[error("fixture I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("fixture line {line}: {message}")]
    FixtureFormat { line: usize, message: String },
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    async fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<String, BackendError>;
}

#[async_trait]
impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    async fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<String, BackendError> {
        (**self).complete(messages, params).await
    }
}

pub(crate) fn check_messages(messages: &[ChatMessage]) -> Result<(), BackendError> {
    if messages.is_empty() {
        return Err(BackendError::InvalidRequest("no messages".into()));
    }
    if let Some(m) = messages
        .iter()
        .find(|m| m.role != Role::System && m.content.is_empty())
    {
        return Err(BackendError::InvalidRequest(format!(
            "empty {:?} message",
            m.role
        )));
    }
    Ok(())
}

/// Stable hash of a request's message list.
pub fn fingerprint(messages: &[ChatMessage]) -> String {
    let canonical = serde_json::to_string(messages).expect("messages serialize");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// Hands out one backend per session key. Replay fixtures are consumed per
/// session, so concurrent sessions must not share a queue.
pub trait BackendFactory: Send + Sync {
    fn session_backend(&self, session: &str) -> Arc<dyn ChatBackend>;
}

/// Every session shares one backend (live endpoints, the simulator).
pub struct SharedBackend(pub Arc<dyn ChatBackend>);

impl BackendFactory for SharedBackend {
    fn session_backend(&self, _session: &str) -> Arc<dyn ChatBackend> {
        self.0.clone()
    }
}

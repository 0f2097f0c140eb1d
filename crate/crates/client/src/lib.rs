//! Typed client for the session service.

use reqwest::{Method, RequestBuilder, StatusCode};
use serde::de::DeserializeOwned;

use soliloquy_core::api::{
    ErrorBody, Health, JudgmentSubmission, JudgmentView, SessionHandle, StartSessionRequest, StudentMessage,
    StudentReply, TraceView, TranscriptView,
};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("{status}: {}{}", body.error, body.detail.as_deref().map(|d| format!(" ({d})")).unwrap_or_default())]
    Api { status: StatusCode, body: ErrorBody },
    #[error(transparent)]
    Transport(#[from] reqwest::Error),
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            Self::Api { status, .. } => Some(*status),
            Self::Transport(e) => e.status(),
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    token: Option<String>,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            token: None,
            http: reqwest::Client::new(),
        }
    }

    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }

    fn request(&self, method: Method, path: &str) -> RequestBuilder {
        let req = self.http.request(method, format!("{}{path}", self.base));
        match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        }
    }

    async fn send<T: DeserializeOwned>(&self, req: RequestBuilder) -> Result<T> {
        let resp = req.send().await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await.unwrap_or_default();
        let body = serde_json::from_str(&text).unwrap_or(ErrorBody {
            error: status.canonical_reason().unwrap_or("error").to_lowercase(),
            detail: (!text.is_empty()).then_some(text),
        });
        Err(ClientError::Api { status, body })
    }

    pub async fn health(&self) -> Result<Health> {
        self.send(self.request(Method::GET, "/healthz")).await
    }

    pub async fn start_session(&self, req: &StartSessionRequest) -> Result<SessionHandle> {
        self.send(self.request(Method::POST, "/sessions").json(req)).await
    }

    pub async fn send_message(&self, session: &str, text: &str) -> Result<StudentReply> {
        let body = StudentMessage { text: text.to_string() };
        self.send(self.request(Method::POST, &format!("/sessions/{session}/messages")).json(&body))
            .await
    }

    pub async fn transcript(&self, session: &str) -> Result<TranscriptView> {
        self.send(self.request(Method::GET, &format!("/sessions/{session}/transcript")))
            .await
    }

    /// Soliloquy behind the `turn`-th tutorbot reply (0-based). Inspector only.
    pub async fn trace(&self, session: &str, turn: usize) -> Result<TraceView> {
        self.send(self.request(Method::GET, &format!("/sessions/{session}/trace/{turn}")))
            .await
    }

    pub async fn judgment(&self, session: &str) -> Result<JudgmentView> {
        self.send(self.request(Method::GET, &format!("/sessions/{session}/judgment")))
            .await
    }

    pub async fn submit_judgment(&self, session: &str, submission: &JudgmentSubmission) -> Result<JudgmentView> {
        self.send(
            self.request(Method::POST, &format!("/sessions/{session}/judgment"))
                .json(submission),
        )
        .await
    }
}

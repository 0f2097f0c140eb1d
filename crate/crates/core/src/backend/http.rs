use std::time::Duration;

use async_trait::async_trait;
use serde::Deserialize;
use serde_json::json;
use tokio::sync::Semaphore;

use super::{check_messages, BackendError, ChatBackend, ChatMessage, CompletionParams};

/// Exponential backoff: retry `n` waits `base_delay * 2^n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(retry)
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// e.g. `https://api.openai.com/v1`; `/chat/completions` is appended.
    pub base_url: String,
    pub api_key: Option<String>,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    pub request_timeout: Duration,
}

impl HttpConfig {
    pub const API_KEY_ENV: &'static str = "SOLILOQUY_API_KEY";

    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: std::env::var(Self::API_KEY_ENV).ok(),
            retry: RetryPolicy::default(),
            max_in_flight: 8,
            request_timeout: Duration::from_secs(120),
        }
    }
}

/// Client for the de-facto standard chat-completion JSON API.
pub struct HttpBackend {
    client: reqwest::Client,
    endpoint: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    in_flight: Semaphore,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

enum Failure {
    Retryable(String),
    Fatal(BackendError),
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let client = reqwest::Client::builder()
            .timeout(config.request_timeout)
            .build()
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            api_key: config.api_key,
            retry: config.retry,
            in_flight: Semaphore::new(config.max_in_flight.max(1)),
        })
    }

    async fn attempt(&self, body: &serde_json::Value) -> Result<String, Failure> {
        let mut request = self.client.post(&self.endpoint).json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .await
            .map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = response.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Failure::Retryable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let body = response.text().await.unwrap_or_default();
            return Err(Failure::Fatal(BackendError::Status {
                status: status.as_u16(),
                body,
            }));
        }
        let parsed: CompletionResponse = response
            .json()
            .await
            .map_err(|e| Failure::Fatal(BackendError::InvalidResponse(e.to_string())))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Failure::Fatal(BackendError::InvalidResponse("no choices".into())))
    }
}

#[async_trait]
impl ChatBackend for HttpBackend {
    async fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<String, BackendError> {
        check_messages(messages)?;
        params.validate()?;
        let mut body = json!({
            "model": params.model,
            "messages": messages,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }

        let _permit = self
            .in_flight
            .acquire()
            .await
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body).await {
                Ok(text) => return Ok(text),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(message)) => {
                    let retry = attempts - 1;
                    if retry >= self.retry.max_retries {
                        return Err(BackendError::Transport { attempts, message });
                    }
                    tracing::warn!(attempt = attempts, %message, "chat completion failed, retrying");
                    tokio::time::sleep(self.retry.delay(retry)).await;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy::default();
        assert_eq!(
            (0..3).map(|r| p.delay(r).as_secs()).collect::<Vec<_>>(),
            vec![1, 2, 4]
        );
    }
}

//! Service and pipeline settings: a TOML file plus environment overrides.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;

use soliloquy_core::backend::{
    BackendError, BackendFactory, CompletionParams, FixtureWriter, HttpBackend, HttpConfig, RecordingFactory,
    ReplayLibrary, RetryPolicy, SharedBackend, SimulatedBackend,
};
use soliloquy_core::orchestrator::EngineConfig;
use soliloquy_core::prompts::{PromptError, TemplateSet};
use soliloquy_core::sandbox::{ExecutionLimits, PythonSandbox, ShimSource};
use soliloquy_core::TutorEngine;

pub const BACKEND_URL_ENV: &str = "SOLILOQUY_BACKEND_URL";
pub const STUDENT_TOKEN_ENV: &str = "SOLILOQUY_STUDENT_TOKEN";
pub const INSPECTOR_TOKEN_ENV: &str = "SOLILOQUY_INSPECTOR_TOKEN";
pub const BIND_ENV: &str = "SOLILOQUY_BIND";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid setting: {0}")]
    Invalid(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("cannot open {path}: {source}")]
    Open {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub bind: String,
    /// Question corpus (JSON Lines) that sessions may reference by id.
    pub questions: Option<PathBuf>,
    /// Directory of `*.txt` templates overriding the built-in ones.
    pub templates_dir: Option<PathBuf>,
    /// Session snapshots, replayed on start.
    pub session_journal: Option<PathBuf>,
    /// SME labels submitted through the service.
    pub label_journal: Option<PathBuf>,
    pub auth: AuthSettings,
    pub engine: EngineSettings,
    pub backend: BackendSettings,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            questions: None,
            templates_dir: None,
            session_journal: None,
            label_journal: None,
            auth: AuthSettings::default(),
            engine: EngineSettings::default(),
            backend: BackendSettings::default(),
        }
    }
}

/// Bearer tokens. With neither set, auth is off and every caller is an
/// inspector.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuthSettings {
    pub student_token: Option<String>,
    pub inspector_token: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSettings {
    pub model: String,
    pub max_repairs: u32,
    pub max_visible_turns: usize,
    pub tutor_temperature: f64,
    pub student_temperature: f64,
    pub tutor_max_tokens: u32,
    pub student_max_tokens: u32,
    pub timeout_secs: f64,
    pub memory_mb: u64,
    /// Interpreter path; `python3` on PATH when unset.
    pub python: Option<PathBuf>,
    /// External shim replacing the built-in one.
    pub shim: Option<PathBuf>,
    pub max_parallel_executions: usize,
}

impl Default for EngineSettings {
    fn default() -> Self {
        let engine = EngineConfig::default();
        Self {
            model: engine.tutor_params.model.clone(),
            max_repairs: engine.max_repairs,
            max_visible_turns: engine.max_visible_turns,
            tutor_temperature: engine.tutor_params.temperature,
            student_temperature: engine.student_params.temperature,
            tutor_max_tokens: engine.tutor_params.max_tokens,
            student_max_tokens: engine.student_params.max_tokens,
            timeout_secs: engine.limits.timeout.as_secs_f64(),
            memory_mb: engine.limits.memory_bytes / (1024 * 1024),
            python: None,
            shim: None,
            max_parallel_executions: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Http,
    Replay,
    Sim,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "http" => Ok(Self::Http),
            "replay" => Ok(Self::Replay),
            "sim" => Ok(Self::Sim),
            other => Err(format!("unknown backend {other:?} (http, replay, sim)")),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSettings {
    pub kind: BackendKind,
    pub url: Option<String>,
    /// Replay fixture for `kind = "replay"`.
    pub fixture: Option<PathBuf>,
    /// Record every exchange to this fixture file.
    pub record: Option<PathBuf>,
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub request_timeout_secs: u64,
}

impl Default for BackendSettings {
    fn default() -> Self {
        Self {
            kind: BackendKind::Http,
            url: None,
            fixture: None,
            record: None,
            max_retries: RetryPolicy::default().max_retries,
            max_in_flight: 8,
            request_timeout_secs: 120,
        }
    }
}

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text).map_err(|message| ConfigError::Parse {
            path: path.display().to_string(),
            message,
        })
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Applies `SOLILOQUY_*` overrides from the process environment.
    pub fn with_env(self) -> Self {
        self.with_env_from(|k| std::env::var(k).ok())
    }

    pub fn with_env_from(mut self, var: impl Fn(&str) -> Option<String>) -> Self {
        if let Some(url) = var(BACKEND_URL_ENV) {
            self.backend.url = Some(url);
        }
        if let Some(t) = var(STUDENT_TOKEN_ENV) {
            self.auth.student_token = Some(t);
        }
        if let Some(t) = var(INSPECTOR_TOKEN_ENV) {
            self.auth.inspector_token = Some(t);
        }
        if let Some(b) = var(BIND_ENV) {
            self.bind = b;
        }
        self
    }

    pub fn engine_config(&self) -> Result<EngineConfig, ConfigError> {
        let e = &self.engine;
        if !(e.timeout_secs > 0.0 && e.timeout_secs.is_finite()) {
            return Err(ConfigError::Invalid(format!("timeout_secs {} must be positive", e.timeout_secs)));
        }
        let params = |temperature, max_tokens| CompletionParams {
            model: e.model.clone(),
            temperature,
            max_tokens,
            seed: None,
        };
        let config = EngineConfig {
            max_repairs: e.max_repairs,
            tutor_params: params(e.tutor_temperature, e.tutor_max_tokens),
            student_params: params(e.student_temperature, e.student_max_tokens),
            limits: ExecutionLimits {
                timeout: Duration::from_secs_f64(e.timeout_secs),
                memory_bytes: e.memory_mb * 1024 * 1024,
            },
            max_visible_turns: e.max_visible_turns,
        };
        config.tutor_params.validate()?;
        config.student_params.validate()?;
        Ok(config)
    }

    pub fn templates(&self) -> Result<TemplateSet, ConfigError> {
        Ok(match &self.templates_dir {
            Some(dir) => TemplateSet::load_dir(dir)?,
            None => TemplateSet::builtin(),
        })
    }

    pub fn sandbox(&self) -> Result<PythonSandbox, ConfigError> {
        let sandbox = match &self.engine.python {
            Some(p) => PythonSandbox::new(p),
            None => PythonSandbox::discover().ok_or_else(|| ConfigError::Invalid("python3 not found on PATH".into()))?,
        };
        let shim = match &self.engine.shim {
            Some(p) => ShimSource::File(p.clone()),
            None => ShimSource::Builtin,
        };
        Ok(sandbox.with_shim(shim).with_max_parallel(self.engine.max_parallel_executions))
    }

    pub fn build_engine(&self) -> Result<TutorEngine, ConfigError> {
        Ok(TutorEngine::new(
            Arc::new(self.templates()?),
            Arc::new(self.sandbox()?),
            self.engine_config()?,
        ))
    }

    pub fn build_backends(&self) -> Result<Arc<dyn BackendFactory>, ConfigError> {
        let b = &self.backend;
        let factory: Arc<dyn BackendFactory> = match b.kind {
            BackendKind::Sim => Arc::new(SharedBackend(Arc::new(SimulatedBackend))),
            BackendKind::Replay => {
                let path = b
                    .fixture
                    .as_ref()
                    .ok_or_else(|| ConfigError::Invalid("replay backend needs a fixture".into()))?;
                Arc::new(ReplayLibrary::from_file(path)?)
            }
            BackendKind::Http => {
                let url = b
                    .url
                    .clone()
                    .ok_or_else(|| ConfigError::Invalid(format!("http backend needs a url (or {BACKEND_URL_ENV})")))?;
                let config = HttpConfig {
                    retry: RetryPolicy {
                        max_retries: b.max_retries,
                        ..RetryPolicy::default()
                    },
                    max_in_flight: b.max_in_flight,
                    request_timeout: Duration::from_secs(b.request_timeout_secs),
                    ..HttpConfig::new(url)
                };
                Arc::new(SharedBackend(Arc::new(HttpBackend::new(config)?)))
            }
        };
        Ok(match &b.record {
            Some(path) => {
                let writer = FixtureWriter::append(path).map_err(|source| ConfigError::Open {
                    path: path.display().to_string(),
                    source,
                })?;
                Arc::new(RecordingFactory::new(factory, Arc::new(writer)))
            }
            None => factory,
        })
    }
}

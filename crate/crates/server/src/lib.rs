//! HTTP service for tutorbot sessions.
//!
//! Students start a session and exchange messages; the soliloquy behind
//! each reply stays on the server and is only readable with the inspector
//! token.

pub mod config;
pub mod store;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::net::TcpListener;

use soliloquy_core::api::{
    ErrorBody, Health, InlineSolution, JudgmentSubmission, JudgmentView, SessionHandle, StartSessionRequest,
    StudentMessage, StudentReply, TraceView, TranscriptView,
};
use soliloquy_core::backend::BackendFactory;
use soliloquy_core::conversation::Provenance;
use soliloquy_core::dataset::QuestionRecord;
use soliloquy_core::evaluation::{apply_labels, judge_case, CaseJudgment, EvalError, LabelJournal, LabelRecord};
use soliloquy_core::orchestrator::StepError;
use soliloquy_core::{Conversation, ConversationStatus, Session, TutorEngine};

pub use config::{Config, ConfigError};
use config::AuthSettings;
use store::{SessionEntry, SessionJournal, SessionStore, Slot};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Student,
    Inspector,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    error: &'static str,
    detail: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str) -> Self {
        Self {
            status,
            error,
            detail: None,
        }
    }

    fn detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }

    fn invalid(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request").detail(detail)
    }

    fn internal(detail: impl ToString) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal").detail(detail.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self {
            status: r.status(),
            error: "invalid_body",
            detail: Some(r.body_text()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.error.to_string(),
            detail: self.detail,
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub struct AppState {
    engine: Arc<TutorEngine>,
    backends: Arc<dyn BackendFactory>,
    questions: HashMap<String, QuestionRecord>,
    sessions: SessionStore,
    auth: AuthSettings,
    journal: Option<SessionJournal>,
    labels: Mutex<Vec<LabelRecord>>,
    label_journal: Option<LabelJournal>,
}

impl AppState {
    pub fn new(engine: Arc<TutorEngine>, backends: Arc<dyn BackendFactory>) -> Self {
        Self {
            engine,
            backends,
            questions: HashMap::new(),
            sessions: SessionStore::default(),
            auth: AuthSettings::default(),
            journal: None,
            labels: Mutex::new(Vec::new()),
            label_journal: None,
        }
    }

    pub fn with_questions(mut self, questions: impl IntoIterator<Item = QuestionRecord>) -> Self {
        self.questions = questions.into_iter().map(|q| (q.id.clone(), q)).collect();
        self
    }

    pub fn with_auth(mut self, auth: AuthSettings) -> Self {
        self.auth = auth;
        self
    }

    /// Restores every session found in the journal, then appends to it.
    pub fn with_session_journal(mut self, path: impl Into<std::path::PathBuf>) -> std::io::Result<Self> {
        let path = path.into();
        let restored = SessionJournal::load(&path)?;
        tracing::info!(sessions = restored.len(), path = %path.display(), "restoring sessions");
        for entry in restored {
            let backend = self.backends.session_backend(&entry.handle.session_id);
            self.sessions.insert(entry, backend);
        }
        self.journal = Some(SessionJournal::open(path)?);
        Ok(self)
    }

    pub fn with_label_journal(mut self, path: impl Into<std::path::PathBuf>) -> Result<Self, EvalError> {
        let journal = LabelJournal::new(path);
        *self.labels.get_mut().unwrap() = journal.load()?;
        self.label_journal = Some(journal);
        Ok(self)
    }

    pub fn from_config(config: &Config) -> Result<Self, Box<dyn std::error::Error + Send + Sync>> {
        let mut state = Self::new(Arc::new(config.build_engine()?), config.build_backends()?)
            .with_auth(config.auth.clone());
        if let Some(path) = &config.questions {
            state = state.with_questions(soliloquy_core::dataset::load_questions(path)?);
        }
        if let Some(path) = &config.session_journal {
            state = state.with_session_journal(path)?;
        }
        if let Some(path) = &config.label_journal {
            state = state.with_label_journal(path)?;
        }
        Ok(state)
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    fn role(&self, headers: &HeaderMap) -> ApiResult<Role> {
        let AuthSettings {
            student_token,
            inspector_token,
        } = &self.auth;
        if student_token.is_none() && inspector_token.is_none() {
            return Ok(Role::Inspector);
        }
        let unauthorized = || ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized");
        let token = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or_else(unauthorized)?;
        if inspector_token.as_deref() == Some(token) {
            Ok(Role::Inspector)
        } else if student_token.as_deref() == Some(token) {
            Ok(Role::Student)
        } else {
            Err(unauthorized())
        }
    }

    fn inspector(&self, headers: &HeaderMap) -> ApiResult<()> {
        match self.role(headers)? {
            Role::Inspector => Ok(()),
            Role::Student => Err(ApiError::new(StatusCode::FORBIDDEN, "forbidden").detail("inspector token required")),
        }
    }

    fn slot(&self, id: &str) -> ApiResult<Arc<Slot>> {
        self.sessions
            .get(id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_session").detail(id.to_string()))
    }

    fn persist(&self, entry: &SessionEntry) {
        if let Some(journal) = &self.journal {
            if let Err(e) = journal.append(entry) {
                tracing::error!(session = %entry.handle.session_id, "journal write failed: {e}");
            }
        }
    }

    fn labels_for(&self, case_id: &str) -> Vec<LabelRecord> {
        self.labels
            .lock()
            .unwrap()
            .iter()
            .filter(|l| l.case_id == case_id)
            .cloned()
            .collect()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/transcript", get(transcript))
        .route("/sessions/{id}/trace/{turn}", get(trace))
        .route("/sessions/{id}/judgment", get(judgment).post(submit_judgment))
        .with_state(state)
}

pub async fn serve(listener: TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    tracing::info!(addr = ?listener.local_addr().ok(), "listening");
    axum::serve(listener, router(state)).await
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        sessions: state.session_count(),
    })
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Json<StartSessionRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<SessionHandle>)> {
    state.role(&headers)?;
    let Json(req) = body?;

    let (question_id, question, solution) = match &req.question_id {
        Some(id) => {
            let record = state
                .questions
                .get(id)
                .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_question").detail(id.clone()))?;
            let solution = match (req.solution, &record.enriched) {
                (Some(s), _) => s.into_enriched().map_err(ApiError::invalid)?,
                (None, Some(e)) => e.clone(),
                (None, None) => InlineSolution::Text(record.sme_solution.clone())
                    .into_enriched()
                    .map_err(ApiError::invalid)?,
            };
            let question = req.question.unwrap_or_else(|| record.question.clone());
            (Some(id.clone()), question, solution)
        }
        None => {
            let question = req
                .question
                .filter(|q| !q.trim().is_empty())
                .ok_or_else(|| ApiError::invalid("question is required without a question_id"))?;
            let solution = req
                .solution
                .ok_or_else(|| ApiError::invalid("solution is required without a question_id"))?
                .into_enriched()
                .map_err(ApiError::invalid)?;
            (None, question, solution)
        }
    };

    let session_id = uuid::Uuid::new_v4().simple().to_string();
    let created_at = now();
    let config = state.engine.config();
    let mut conversation = Conversation::new(&session_id, question_id.clone().unwrap_or_default());
    conversation.provenance = Provenance {
        tutor_params: Some(config.tutor_params.clone()),
        max_repairs: config.max_repairs,
        template_checksums: state.engine.templates().checksums(),
        started_at: Some(created_at.clone()),
        ..Provenance::default()
    };
    let handle = SessionHandle {
        session_id: session_id.clone(),
        created_at,
        question_id,
        finished: false,
    };
    let entry = SessionEntry {
        handle: handle.clone(),
        session: Session::new(conversation, question, solution),
    };
    state.persist(&entry);
    state.sessions.insert(entry, state.backends.session_backend(&session_id));
    tracing::info!(session = %session_id, "session started");
    Ok((StatusCode::CREATED, Json(handle)))
}

async fn post_message(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<StudentMessage>, JsonRejection>,
) -> ApiResult<Json<StudentReply>> {
    state.role(&headers)?;
    let Json(msg) = body?;
    if msg.text.trim().is_empty() {
        return Err(ApiError::invalid("message text is empty"));
    }
    let slot = state.slot(&id)?;
    let mut entry = slot
        .entry
        .try_lock()
        .map_err(|_| ApiError::new(StatusCode::CONFLICT, "busy").detail("a message is already being answered"))?;
    if entry.session.finished {
        return Err(ApiError::new(StatusCode::CONFLICT, "finished").detail("the problem is already solved"));
    }

    let outcome = state
        .engine
        .step(&mut entry.session, &msg.text, slot.backend.as_ref())
        .await;
    let result = match outcome {
        Ok((turn, _)) => {
            let finished = entry.session.finished;
            entry.handle.finished = finished;
            if finished {
                entry.session.conversation.status = ConversationStatus::Complete;
                entry.session.conversation.provenance.finished_at = Some(now());
            }
            Ok(Json(StudentReply {
                response: turn.response,
                step_state: turn.step_state,
                finished,
            }))
        }
        Err(StepError::SessionFinished) => Err(ApiError::new(StatusCode::CONFLICT, "finished")),
        Err(e @ (StepError::ProtocolFailure { .. } | StepError::Backend { .. })) => {
            tracing::warn!(session = %id, "step failed: {e}");
            Err(ApiError::new(StatusCode::BAD_GATEWAY, "tutor_unavailable")
                .detail("the tutorbot could not produce a reply; the session is unchanged, try again"))
        }
        Err(e @ StepError::Prompt(_)) => Err(ApiError::internal(e)),
    };
    state.persist(&entry);
    result
}

async fn transcript(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> ApiResult<Json<TranscriptView>> {
    state.role(&headers)?;
    let slot = state.slot(&id)?;
    let entry = slot.entry.lock().await;
    Ok(Json(TranscriptView {
        session_id: id,
        turns: entry.session.conversation.turns.clone(),
        finished: entry.session.finished,
    }))
}

async fn trace(
    State(state): State<Arc<AppState>>,
    Path((id, turn)): Path<(String, usize)>,
    headers: HeaderMap,
) -> ApiResult<Json<TraceView>> {
    state.inspector(&headers)?;
    let slot = state.slot(&id)?;
    let entry = slot.entry.lock().await;
    let session = &entry.session;
    if let Some(trace) = session.trace(turn) {
        return Ok(Json(TraceView::Complete {
            turn,
            trace: trace.clone(),
        }));
    }
    // a failed step sits where its tutorbot turn would have been
    match &session.last_failure {
        Some(failure) if turn == session.conversation.tutor_turn_count() => Ok(Json(TraceView::Failed {
            turn,
            failure: failure.clone(),
        })),
        _ => Err(ApiError::new(StatusCode::NOT_FOUND, "unknown_turn").detail(turn.to_string())),
    }
}

async fn current_judgment(state: &AppState, id: &str) -> ApiResult<CaseJudgment> {
    let slot = state.slot(id)?;
    let conversation = slot.entry.lock().await.session.conversation.clone();
    let mut judgment = match judge_case(id, &conversation, state.engine.executor().as_ref()).await {
        Ok(j) => j,
        Err(EvalError::IncompleteRecord(..)) => CaseJudgment::new(id),
        Err(e) => return Err(ApiError::internal(e)),
    };
    apply_labels(&mut judgment, &state.labels_for(id));
    Ok(judgment)
}

async fn judgment(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> ApiResult<Json<JudgmentView>> {
    state.inspector(&headers)?;
    let judgment = current_judgment(&state, &id).await?;
    Ok(Json(JudgmentView {
        session_id: id,
        judgment,
    }))
}

async fn submit_judgment(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<JudgmentSubmission>, JsonRejection>,
) -> ApiResult<Json<JudgmentView>> {
    state.inspector(&headers)?;
    let Json(submission) = body?;
    state.slot(&id)?;
    let mut labels = submission.labels;
    for label in &mut labels {
        if label.case_id.is_empty() {
            label.case_id = id.clone();
        }
        if label.case_id != id {
            return Err(ApiError::invalid(format!("label for {} sent to session {id}", label.case_id)));
        }
        label.validate().map_err(ApiError::invalid)?;
    }
    if let Some(journal) = &state.label_journal {
        for label in &labels {
            journal.append(label).map_err(ApiError::internal)?;
        }
    }
    state.labels.lock().unwrap().extend(labels);
    let judgment = current_judgment(&state, &id).await?;
    Ok(Json(JudgmentView {
        session_id: id,
        judgment,
    }))
}

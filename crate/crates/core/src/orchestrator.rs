//! The code-soliloquy dialogue engine.
//!
//! Every student message starts a hidden loop inside the tutorbot:
//!
//! ```text
//!   Deciding --y--> UsePython --execute--> ReceivedPython --respond--> Deciding
//!      \--n--> NoPython --respond--> Deciding
//! ```
//!
//! Each state has its own prompt. Only the final tutorbot response becomes
//! visible; the decision, the code and its output are kept in a
//! [`SoliloquyTrace`] attached to that response.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, ChatBackend, ChatMessage, CompletionParams};
use crate::conversation::{Conversation, ConversationStatus, Speaker, VisibleTurn};
use crate::prompts::{serialize_history, Audience, Bindings, PromptError, TemplateId, TemplateSet};
use crate::protocol::{
    parse_codegen, parse_decision, parse_tutor_turn, CodeArtifact, Decision, EnrichedSolution,
    ProtocolError, StepState, TutorTurn,
};
use crate::sandbox::{format_python_output, CodeExecutor, ExecutionLimits, ExecutionResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoliloquyState {
    #[default]
    Deciding,
    UsePython,
    ReceivedPython,
    NoPython,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateEvent {
    DecidedYes,
    DecidedNo,
    CodeExecuted,
    Responded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("illegal transition from {from:?} on {event:?}")]
pub struct IllegalTransition {
    pub from: SoliloquyState,
    pub event: StateEvent,
}

impl SoliloquyState {
    pub fn next(self, event: StateEvent) -> Result<Self, IllegalTransition> {
        use SoliloquyState::*;
        use StateEvent::*;
        match (self, event) {
            (Deciding, DecidedYes) => Ok(UsePython),
            (Deciding, DecidedNo) => Ok(NoPython),
            (UsePython, CodeExecuted) => Ok(ReceivedPython),
            (ReceivedPython, Responded) | (NoPython, Responded) => Ok(Deciding),
            (from, event) => Err(IllegalTransition { from, event }),
        }
    }
}

impl fmt::Display for SoliloquyState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Deciding => "deciding",
            Self::UsePython => "use_python",
            Self::ReceivedPython => "received_python",
            Self::NoPython => "no_python",
        })
    }
}

/// One model call made inside the soliloquy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub state: SoliloquyState,
    /// The rendered state prompt (repairs resend it with a correction).
    pub prompt: String,
    pub reply: String,
    /// Parser complaint when the reply was rejected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// The hidden sub-dialogue behind one visible tutorbot response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoliloquyTrace {
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact: Option<CodeArtifact>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub execution: Option<ExecutionResult>,
    pub tutor_turn: TutorTurn,
    pub exchanges: Vec<Exchange>,
    pub repair_attempts: u32,
}

impl SoliloquyTrace {
    /// States visited, in order, without repeats from repairs.
    pub fn states(&self) -> Vec<SoliloquyState> {
        let mut out: Vec<SoliloquyState> = Vec::new();
        for e in &self.exchanges {
            if out.last() != Some(&e.state) {
                out.push(e.state);
            }
        }
        out
    }

    /// Exchange whose reply was accepted for `state`.
    pub fn accepted(&self, state: SoliloquyState) -> Option<&Exchange> {
        self.exchanges
            .iter()
            .find(|e| e.state == state && e.error.is_none())
    }

    pub fn python_output(&self) -> Option<String> {
        self.execution.as_ref().map(format_python_output)
    }

    /// Texts that must never reach the student.
    pub fn hidden_fragments(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(d) = &self.decision.description {
            out.push(d.clone());
        }
        if let Some(a) = &self.artifact {
            out.push(a.code.clone());
        }
        if let Some(e) = &self.execution {
            out.push(format_python_output(e));
            out.push(e.stderr.clone());
        }
        out.push(self.tutor_turn.thoughts.clone());
        for e in &self.exchanges {
            let final_state = matches!(e.state, SoliloquyState::ReceivedPython | SoliloquyState::NoPython);
            // the accepted final reply carries the visible response itself
            if !(final_state && e.error.is_none()) {
                out.push(e.reply.clone());
            }
        }
        out
    }

    /// use_python ⇔ artifact and execution present, and the visited
    /// states follow the transition relation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let with_code = self.artifact.is_some() && self.execution.is_some();
        if self.decision.use_python != with_code {
            return Err(format!(
                "use_python={} but artifact/execution present={with_code}",
                self.decision.use_python
            ));
        }
        let mut state = SoliloquyState::Deciding;
        let states = self.states();
        if states.first() != Some(&SoliloquyState::Deciding) {
            return Err(format!("trace starts at {:?}", states.first()));
        }
        for next in &states[1..] {
            let event = match (state, next) {
                (SoliloquyState::Deciding, SoliloquyState::UsePython) => StateEvent::DecidedYes,
                (SoliloquyState::Deciding, SoliloquyState::NoPython) => StateEvent::DecidedNo,
                (SoliloquyState::UsePython, SoliloquyState::ReceivedPython) => StateEvent::CodeExecuted,
                (from, to) => return Err(format!("illegal step {from:?} -> {to:?}")),
            };
            state = state.next(event).map_err(|e| e.to_string())?;
        }
        state
            .next(StateEvent::Responded)
            .map_err(|e| format!("trace ends in {state:?}: {e}"))?;
        Ok(())
    }
}

/// A soliloquy that could not be completed; kept for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFailure {
    pub student_message: String,
    pub state: SoliloquyState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<Decision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact: Option<CodeArtifact>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub execution: Option<ExecutionResult>,
    pub exchanges: Vec<Exchange>,
    pub repair_attempts: u32,
    pub reason: String,
}

#[derive(Debug, thiserror::Error)]
pub enum StepError {
    #[error("session is finished")]
    SessionFinished,
    #[error("protocol failure in {state} state after repairs: {reason}")]
    ProtocolFailure {
        state: SoliloquyState,
        reason: ProtocolError,
    },
    #[error("backend failure in {state} state: {source}")]
    Backend {
        state: SoliloquyState,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub max_repairs: u32,
    pub tutor_params: CompletionParams,
    pub student_params: CompletionParams,
    pub limits: ExecutionLimits,
    /// Cap on tutorbot turns per generated conversation.
    pub max_visible_turns: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            max_repairs: 3,
            tutor_params: CompletionParams::tutor_default(),
            student_params: CompletionParams::student_default(),
            limits: ExecutionLimits::default(),
            max_visible_turns: 40,
        }
    }
}

/// A tutorbot session: one question, one growing conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub question: String,
    pub solution: EnrichedSolution,
    pub conversation: Conversation,
    pub state: SoliloquyState,
    pub finished: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_failure: Option<StepFailure>,
}

impl Session {
    pub fn new(conversation: Conversation, question: impl Into<String>, solution: EnrichedSolution) -> Self {
        Self {
            question: question.into(),
            solution,
            conversation,
            state: SoliloquyState::Deciding,
            finished: false,
            last_failure: None,
        }
    }

    /// Trace behind the `ordinal`-th tutorbot turn.
    pub fn trace(&self, ordinal: usize) -> Option<&SoliloquyTrace> {
        let idx = self.conversation.tutor_turn_index(ordinal)?;
        self.conversation.traces.get(&idx)
    }
}

/// Text of the correction appended when a reply cannot be parsed.
pub fn correction_notice(error: &ProtocolError) -> String {
    format!(
        "Your previous reply could not be used: {error}. Reply again with only the JSON object, using exactly the field names and allowed values requested above."
    )
}

struct StepLog {
    exchanges: Vec<Exchange>,
    repairs: u32,
}

pub struct TutorEngine {
    templates: Arc<TemplateSet>,
    executor: Arc<dyn CodeExecutor>,
    config: EngineConfig,
}

impl TutorEngine {
    pub fn new(templates: Arc<TemplateSet>, executor: Arc<dyn CodeExecutor>, config: EngineConfig) -> Self {
        Self {
            templates,
            executor,
            config,
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn executor(&self) -> &Arc<dyn CodeExecutor> {
        &self.executor
    }

    async fn consult<T>(
        &self,
        state: SoliloquyState,
        prompt: String,
        backend: &dyn ChatBackend,
        parse: fn(&str) -> Result<T, ProtocolError>,
        log: &mut StepLog,
    ) -> Result<T, StepError> {
        let mut messages = vec![ChatMessage::user(prompt.clone())];
        let mut attempt = 0;
        loop {
            let reply = backend
                .complete(&messages, &self.config.tutor_params)
                .await
                .map_err(|source| StepError::Backend { state, source })?;
            match parse(&reply) {
                Ok(value) => {
                    log.exchanges.push(Exchange {
                        state,
                        prompt,
                        reply,
                        error: None,
                    });
                    return Ok(value);
                }
                Err(reason) => {
                    log.exchanges.push(Exchange {
                        state,
                        prompt: prompt.clone(),
                        reply: reply.clone(),
                        error: Some(reason.to_string()),
                    });
                    if attempt >= self.config.max_repairs {
                        return Err(StepError::ProtocolFailure { state, reason });
                    }
                    attempt += 1;
                    log.repairs += 1;
                    tracing::debug!(%state, %reason, attempt, "re-prompting after malformed reply");
                    messages.push(ChatMessage::assistant(reply));
                    messages.push(ChatMessage::user(correction_notice(&reason)));
                }
            }
        }
    }

    /// Runs one full soliloquy for `student_message` and appends the
    /// student message, the visible response and its trace to the session.
    ///
    /// On failure the conversation is left untouched and the partial
    /// soliloquy is kept in `session.last_failure`.
    pub async fn step(
        &self,
        session: &mut Session,
        student_message: &str,
        backend: &dyn ChatBackend,
    ) -> Result<(TutorTurn, SoliloquyTrace), StepError> {
        if session.finished {
            return Err(StepError::SessionFinished);
        }
        debug_assert_eq!(session.state, SoliloquyState::Deciding);
        session.last_failure = None;

        let mut log = StepLog {
            exchanges: Vec::new(),
            repairs: 0,
        };
        let mut partial = Partial::default();
        let outcome = self
            .soliloquy(session, student_message, backend, &mut log, &mut partial)
            .await;
        // whatever happened, the tutorbot is ready for the next student input
        session.state = SoliloquyState::Deciding;

        match outcome {
            Ok(turn) => {
                let trace = SoliloquyTrace {
                    decision: partial.decision.expect("decision recorded"),
                    artifact: partial.artifact,
                    execution: partial.execution,
                    tutor_turn: turn.clone(),
                    exchanges: log.exchanges,
                    repair_attempts: log.repairs,
                };
                let conv = &mut session.conversation;
                conv.turns.push(VisibleTurn {
                    speaker: Speaker::Student,
                    text: student_message.to_string(),
                });
                conv.turns.push(VisibleTurn {
                    speaker: Speaker::Tutorbot,
                    text: turn.response.clone(),
                });
                conv.traces.insert(conv.turns.len() - 1, trace.clone());
                if turn.step_state == StepState::ProblemFinished {
                    session.finished = true;
                }
                Ok((turn, trace))
            }
            Err(err) => {
                let state = match &err {
                    StepError::ProtocolFailure { state, .. } | StepError::Backend { state, .. } => *state,
                    _ => partial.state,
                };
                session.last_failure = Some(StepFailure {
                    student_message: student_message.to_string(),
                    state,
                    decision: partial.decision,
                    artifact: partial.artifact,
                    execution: partial.execution,
                    exchanges: log.exchanges,
                    repair_attempts: log.repairs,
                    reason: err.to_string(),
                });
                Err(err)
            }
        }
    }

    async fn soliloquy(
        &self,
        session: &mut Session,
        student_message: &str,
        backend: &dyn ChatBackend,
        log: &mut StepLog,
        partial: &mut Partial,
    ) -> Result<TutorTurn, StepError> {
        let mut visible = session.conversation.turns.clone();
        visible.push(VisibleTurn {
            speaker: Speaker::Student,
            text: student_message.to_string(),
        });
        let history = serialize_history(&visible, Audience::Tutorbot);
        let base = Bindings::new()
            .with("question", session.question.as_str())
            .with("solution", session.solution.detailed.as_str())
            .with("history", history);

        partial.state = SoliloquyState::Deciding;
        let prompt = self.templates.render(TemplateId::Deciding, &base)?;
        let decision = self
            .consult(SoliloquyState::Deciding, prompt, backend, parse_decision, log)
            .await?;
        partial.decision = Some(decision.clone());

        if let Some(description) = decision.description.as_deref().filter(|_| decision.use_python) {
            session.state = advance(session.state, StateEvent::DecidedYes);
            partial.state = session.state;
            let prompt = self.templates.render(
                TemplateId::UsePython,
                &Bindings::new().with("description", description),
            )?;
            let artifact = self
                .consult(SoliloquyState::UsePython, prompt, backend, parse_codegen, log)
                .await?;
            partial.artifact = Some(artifact.clone());

            let execution = self.executor.execute(&artifact, &self.config.limits).await;
            let python_output = format_python_output(&execution);
            partial.execution = Some(execution);
            session.state = advance(session.state, StateEvent::CodeExecuted);
            partial.state = session.state;

            let prompt = self.templates.render(
                TemplateId::ReceivedPython,
                &base
                    .clone()
                    .with("description", description)
                    .with("python_output", python_output),
            )?;
            let turn = self
                .consult(SoliloquyState::ReceivedPython, prompt, backend, parse_tutor_turn, log)
                .await?;
            session.state = advance(session.state, StateEvent::Responded);
            Ok(turn)
        } else {
            session.state = advance(session.state, StateEvent::DecidedNo);
            partial.state = session.state;
            let prompt = self.templates.render(TemplateId::NoPython, &base)?;
            let turn = self
                .consult(SoliloquyState::NoPython, prompt, backend, parse_tutor_turn, log)
                .await?;
            session.state = advance(session.state, StateEvent::Responded);
            Ok(turn)
        }
    }

    /// Simulates a whole student/tutorbot conversation.
    pub async fn run_mock_conversation(
        &self,
        spec: MockConversation<'_>,
        backend: &dyn ChatBackend,
        clock: &Clock,
    ) -> Conversation {
        let mut conversation = Conversation::new(spec.conversation_id, spec.question_id);
        conversation.provenance = crate::conversation::Provenance {
            seed: Some(spec.policy.seed),
            error_rate: Some(spec.policy.error_rate),
            student_params: Some(self.config.student_params.clone()),
            tutor_params: Some(self.config.tutor_params.clone()),
            max_repairs: self.config.max_repairs,
            template_checksums: self.templates.checksums(),
            student_error_modes: Vec::new(),
            started_at: clock.now(),
            finished_at: None,
        };
        let mut session = Session::new(conversation, spec.question, spec.solution.clone());
        let mut student = StudentAgent::new(spec.policy);

        let (status, failure) = loop {
            if session.conversation.tutor_turn_count() >= self.config.max_visible_turns {
                break (ConversationStatus::Truncated, None);
            }
            let reply = student
                .respond(
                    &self.templates,
                    spec.question,
                    &session.conversation.turns,
                    backend,
                    &self.config.student_params,
                )
                .await;
            let (message, mode) = match reply {
                Ok(r) => r,
                Err(e) => break (ConversationStatus::Failed, Some(format!("student: {e}"))),
            };
            match self.step(&mut session, &message, backend).await {
                Ok(_) => {
                    session.conversation.provenance.student_error_modes.push(mode);
                    if session.finished {
                        break (ConversationStatus::Complete, None);
                    }
                }
                Err(e) => break (ConversationStatus::Failed, Some(e.to_string())),
            }
        };

        let mut conversation = session.conversation;
        conversation.status = status;
        conversation.failure = failure;
        conversation.provenance.finished_at = clock.now();
        conversation
    }
}

#[derive(Default)]
struct Partial {
    state: SoliloquyState,
    decision: Option<Decision>,
    artifact: Option<CodeArtifact>,
    execution: Option<ExecutionResult>,
}

fn advance(state: SoliloquyState, event: StateEvent) -> SoliloquyState {
    state
        .next(event)
        .unwrap_or_else(|e| unreachable!("engine drove an illegal transition: {e}"))
}

/// Inputs of one simulated conversation.
#[derive(Debug, Clone)]
pub struct MockConversation<'a> {
    pub conversation_id: &'a str,
    pub question_id: &'a str,
    pub question: &'a str,
    pub solution: &'a EnrichedSolution,
    pub policy: StudentPolicy,
}

/// Timestamp source for provenance.
#[derive(Debug, Clone, Default)]
pub enum Clock {
    /// No timestamps; output depends only on the inputs.
    #[default]
    None,
    Fixed(String),
    System,
}

impl Clock {
    pub fn now(&self) -> Option<String> {
        match self {
            Clock::None => None,
            Clock::Fixed(s) => Some(s.clone()),
            Clock::System => Some(
                chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            ),
        }
    }
}

// ---------------------------------------------------------------------------
// Student
// ---------------------------------------------------------------------------

/// Opening words of the instruction appended to the student prompt when an
/// incorrect response is requested.
pub const ERROR_DIRECTIVE_PREFIX: &str = "For this response only, make exactly one mistake:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    WrongFormula,
    WrongRearrangement,
    WrongUnitConversion,
    CalculationError,
}

impl ErrorMode {
    pub const ALL: [ErrorMode; 4] = [
        Self::WrongFormula,
        Self::WrongRearrangement,
        Self::WrongUnitConversion,
        Self::CalculationError,
    ];

    pub fn instruction(self) -> &'static str {
        match self {
            Self::WrongFormula => "apply the wrong formulae",
            Self::WrongRearrangement => {
                "incorrectly rearrange the formulae to isolate the unknown variable on one side"
            }
            Self::WrongUnitConversion => "perform unit conversion incorrectly",
            Self::CalculationError => "error in calculations",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentPolicy {
    pub error_rate: f64,
    pub seed: u64,
}

impl StudentPolicy {
    pub const DEFAULT_ERROR_RATE: f64 = 0.10;

    pub fn new(error_rate: f64, seed: u64) -> Result<Self, String> {
        if !(0.0..=1.0).contains(&error_rate) {
            return Err(format!("error rate {error_rate} outside [0, 1]"));
        }
        Ok(Self { error_rate, seed })
    }

    pub fn with_seed(seed: u64) -> Self {
        Self {
            error_rate: Self::DEFAULT_ERROR_RATE,
            seed,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StudentError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("student reply was empty")]
    EmptyReply,
}

/// The simulated student. Whether a reply should be wrong is drawn from a
/// seeded generator, so a run can be regenerated exactly.
#[derive(Debug, Clone)]
pub struct StudentAgent {
    policy: StudentPolicy,
    rng: ChaCha8Rng,
}

impl StudentAgent {
    pub fn new(policy: StudentPolicy) -> Self {
        Self {
            policy,
            rng: ChaCha8Rng::seed_from_u64(policy.seed),
        }
    }

    /// One draw per student turn.
    pub fn draw_error(&mut self) -> Option<ErrorMode> {
        let roll: f64 = self.rng.random();
        let mode = ErrorMode::ALL[self.rng.random_range(0..ErrorMode::ALL.len())];
        (roll < self.policy.error_rate).then_some(mode)
    }

    pub fn render_prompt(
        templates: &TemplateSet,
        question: &str,
        turns: &[VisibleTurn],
        mode: Option<ErrorMode>,
    ) -> Result<String, PromptError> {
        let bindings = Bindings::new()
            .with("question", question)
            .with("history", serialize_history(turns, Audience::Student));
        let mut prompt = templates.render(TemplateId::Student, &bindings)?;
        if let Some(mode) = mode {
            prompt.push_str(&format!("\n\n{ERROR_DIRECTIVE_PREFIX} {}.", mode.instruction()));
        }
        Ok(prompt)
    }

    pub async fn respond(
        &mut self,
        templates: &TemplateSet,
        question: &str,
        turns: &[VisibleTurn],
        backend: &dyn ChatBackend,
        params: &CompletionParams,
    ) -> Result<(String, Option<ErrorMode>), StudentError> {
        let mode = self.draw_error();
        let prompt = Self::render_prompt(templates, question, turns, mode)?;
        let reply = backend.complete(&[ChatMessage::user(prompt)], params).await?;
        let text = clean_student_reply(&reply);
        if text.is_empty() {
            return Err(StudentError::EmptyReply);
        }
        Ok((text, mode))
    }
}

/// Drops a leading speaker label the model sometimes echoes.
fn clean_student_reply(reply: &str) -> String {
    let t = reply.trim();
    let t = t.strip_prefix("Student:").unwrap_or(t).trim();
    let t = t
        .strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(t);
    t.trim().to_string()
}

//! Question corpus, solution enrichment, batch generation, and export.
//!
//! Everything on disk is JSON Lines:
//! - `questions.jsonl`: `{id, question, sme_solution, topic, enriched?}`
//! - `transcripts.jsonl`: one full [`Conversation`] per line
//! - `finetune.jsonl`: `{messages: [{role, content, loss_flag}]}`

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{BackendError, BackendFactory, ChatBackend, ChatMessage, CompletionParams};
use crate::conversation::{Conversation, ConversationStatus, Speaker};
use crate::orchestrator::{
    correction_notice, Clock, MockConversation, SoliloquyState, StudentPolicy, TutorEngine,
};
use crate::prompts::{Bindings, PromptError, TemplateId, TemplateSet};
use crate::protocol::{parse_enriched_solution, EnrichedSolution, ProtocolError};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate question id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("question `{0}` has not been enriched")]
    NotEnriched(String),
    #[error("enrichment of `{id}` failed after repairs: {reason}")]
    ProtocolFailure { id: String, reason: ProtocolError },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub question: String,
    pub sme_solution: String,
    #[serde(default)]
    pub topic: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enriched: Option<EnrichedSolution>,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(
    path: &Path,
) -> Result<Vec<(usize, T)>, DatasetError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), DatasetError> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, &item).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_questions(path: impl AsRef<Path>) -> Result<Vec<QuestionRecord>, DatasetError> {
    let mut seen = HashSet::new();
    let mut corpus = Vec::new();
    for (line, record) in read_jsonl::<QuestionRecord>(path.as_ref())? {
        if record.question.trim().is_empty() || record.sme_solution.trim().is_empty() {
            return Err(DatasetError::Parse {
                line,
                message: "question and sme_solution must be non-empty".into(),
            });
        }
        if !seen.insert(record.id.clone()) {
            return Err(DatasetError::DuplicateId { line, id: record.id });
        }
        corpus.push(record);
    }
    Ok(corpus)
}

pub fn save_questions(path: impl AsRef<Path>, corpus: &[QuestionRecord]) -> Result<(), DatasetError> {
    write_jsonl(path.as_ref(), corpus)
}

/// Settings shared by the auxiliary (non-dialogue) prompts.
#[derive(Debug, Clone)]
pub struct EnrichOptions {
    pub max_repairs: u32,
    pub params: CompletionParams,
    pub force: bool,
}

impl Default for EnrichOptions {
    fn default() -> Self {
        Self {
            max_repairs: 3,
            params: CompletionParams::tutor_default(),
            force: false,
        }
    }
}

/// Rewrites the SME solution as a numbered narrative and stores it on the
/// record. Returns `false` without calling the backend when the record is
/// already enriched and `force` is off. On failure the record is unchanged.
pub async fn enrich_solution(
    record: &mut QuestionRecord,
    templates: &TemplateSet,
    backend: &dyn ChatBackend,
    options: &EnrichOptions,
) -> Result<bool, DatasetError> {
    if record.enriched.is_some() && !options.force {
        return Ok(false);
    }
    let prompt = templates.render(
        TemplateId::EnrichSolution,
        &Bindings::new()
            .with("question", record.question.as_str())
            .with("solution", record.sme_solution.as_str()),
    )?;
    let mut messages = vec![ChatMessage::user(prompt)];
    let mut attempt = 0;
    loop {
        let reply = backend.complete(&messages, &options.params).await?;
        match parse_enriched_solution(&reply) {
            Ok(solution) => {
                record.enriched = Some(solution);
                return Ok(true);
            }
            Err(reason) if attempt >= options.max_repairs => {
                return Err(DatasetError::ProtocolFailure {
                    id: record.id.clone(),
                    reason,
                })
            }
            Err(reason) => {
                attempt += 1;
                messages.push(ChatMessage::assistant(reply));
                messages.push(ChatMessage::user(correction_notice(&reason)));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Scheduling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleSpec {
    /// Total conversations, spread round-robin over questions in id order.
    Total(usize),
    PerQuestion(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledRun {
    pub conversation_id: String,
    pub question_id: String,
    pub replicate: usize,
    pub seed: u64,
}

/// Stable seed for one conversation.
pub fn derive_seed(corpus_seed: u64, question_id: &str, replicate: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(corpus_seed.to_le_bytes());
    h.update((question_id.len() as u64).to_le_bytes());
    h.update(question_id.as_bytes());
    h.update((replicate as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn conversation_id(question_id: &str, replicate: usize) -> String {
    format!("{question_id}-r{replicate}")
}

/// Every question once, then again from the first question in id order,
/// until the total is met.
pub fn plan_schedule(
    question_ids: &[&str],
    spec: ScheduleSpec,
    corpus_seed: u64,
) -> Result<Vec<ScheduledRun>, DatasetError> {
    let mut ids: Vec<&str> = question_ids.to_vec();
    ids.sort_unstable();
    let total = match spec {
        ScheduleSpec::Total(n) => n,
        ScheduleSpec::PerQuestion(k) => k * ids.len(),
    };
    if ids.is_empty() && total > 0 {
        return Err(DatasetError::Schedule("no questions to schedule".into()));
    }
    Ok((0..total)
        .map(|k| {
            let qid = ids[k % ids.len()];
            let replicate = k / ids.len();
            ScheduledRun {
                conversation_id: conversation_id(qid, replicate),
                question_id: qid.to_string(),
                replicate,
                seed: derive_seed(corpus_seed, qid, replicate),
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GenerationOptions {
    pub schedule: ScheduleSpec,
    pub corpus_seed: u64,
    pub error_rate: f64,
    pub workers: usize,
    /// Conversation ids already generated; they are skipped.
    pub completed: HashSet<String>,
    pub clock: Clock,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            schedule: ScheduleSpec::PerQuestion(1),
            corpus_seed: 0,
            error_rate: StudentPolicy::DEFAULT_ERROR_RATE,
            workers: 4,
            completed: HashSet::new(),
            clock: Clock::None,
        }
    }
}

/// Appends finished conversations to a transcript file as they complete.
pub struct TranscriptSink {
    out: Mutex<BufWriter<File>>,
}

impl TranscriptSink {
    pub fn append(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(Self {
            out: Mutex::new(BufWriter::new(file)),
        })
    }

    pub fn write(&self, conversation: &Conversation) -> std::io::Result<()> {
        let line = serde_json::to_string(conversation)?;
        let mut out = self.out.lock().unwrap();
        writeln!(out, "{line}")?;
        out.flush()
    }
}

/// Generates the scheduled conversations not listed in
/// `options.completed`, returning them in schedule order. Failed
/// conversations are returned with status `failed`; the batch continues.
pub async fn generate_corpus(
    corpus: &[QuestionRecord],
    engine: &TutorEngine,
    backends: &dyn BackendFactory,
    options: &GenerationOptions,
    sink: Option<&TranscriptSink>,
) -> Result<Vec<Conversation>, DatasetError> {
    StudentPolicy::new(options.error_rate, 0).map_err(DatasetError::Schedule)?;
    let by_id: HashMap<&str, &QuestionRecord> = corpus.iter().map(|r| (r.id.as_str(), r)).collect();
    if let Some(r) = corpus.iter().find(|r| r.enriched.is_none()) {
        return Err(DatasetError::NotEnriched(r.id.clone()));
    }
    let ids: Vec<&str> = corpus.iter().map(|r| r.id.as_str()).collect();
    let runs: Vec<(usize, ScheduledRun)> = plan_schedule(&ids, options.schedule, options.corpus_seed)?
        .into_iter()
        .filter(|r| !options.completed.contains(&r.conversation_id))
        .enumerate()
        .collect();

    let sink_error: Arc<Mutex<Option<std::io::Error>>> = Arc::default();
    let mut results: Vec<(usize, Conversation)> = stream::iter(runs)
        .map(|(order, run)| {
            let record = by_id[run.question_id.as_str()];
            let sink_error = sink_error.clone();
            async move {
                let backend = backends.session_backend(&run.conversation_id);
                let solution = record.enriched.as_ref().expect("checked above");
                let conversation = engine
                    .run_mock_conversation(
                        MockConversation {
                            conversation_id: &run.conversation_id,
                            question_id: &record.id,
                            question: &record.question,
                            solution,
                            policy: StudentPolicy {
                                error_rate: options.error_rate,
                                seed: run.seed,
                            },
                        },
                        backend.as_ref(),
                        &options.clock,
                    )
                    .await;
                if conversation.status == ConversationStatus::Failed {
                    tracing::warn!(id = %conversation.id, failure = ?conversation.failure, "conversation failed");
                }
                if let Some(sink) = sink {
                    if let Err(e) = sink.write(&conversation) {
                        sink_error.lock().unwrap().get_or_insert(e);
                    }
                }
                (order, conversation)
            }
        })
        .buffer_unordered(options.workers.max(1))
        .collect()
        .await;

    if let Some(e) = sink_error.lock().unwrap().take() {
        return Err(e.into());
    }
    results.sort_by_key(|(order, _)| *order);
    Ok(results.into_iter().map(|(_, c)| c).collect())
}

/// Orders conversations by their position in the schedule; ids not in the
/// schedule go last in id order.
pub fn canonical_order(conversations: &mut [Conversation], schedule: &[ScheduledRun]) {
    let rank: HashMap<&str, usize> = schedule
        .iter()
        .enumerate()
        .map(|(i, r)| (r.conversation_id.as_str(), i))
        .collect();
    conversations.sort_by(|a, b| {
        let ka = (rank.get(a.id.as_str()).copied().unwrap_or(usize::MAX), &a.id);
        let kb = (rank.get(b.id.as_str()).copied().unwrap_or(usize::MAX), &b.id);
        ka.cmp(&kb)
    });
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

pub fn export_transcripts(conversations: &[Conversation], path: impl AsRef<Path>) -> Result<(), DatasetError> {
    write_jsonl(path.as_ref(), conversations)
}

pub fn import_transcripts(path: impl AsRef<Path>) -> Result<Vec<Conversation>, DatasetError> {
    Ok(read_jsonl(path.as_ref())?.into_iter().map(|(_, c)| c).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneMessage {
    pub role: String,
    pub content: String,
    pub loss_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneExample {
    pub messages: Vec<FinetuneMessage>,
}

#[derive(Debug, Clone, Copy)]
pub struct FinetuneOptions {
    /// Render the soliloquy sub-turns (state prompts and outputs).
    pub include_traces: bool,
    pub include_truncated: bool,
    pub include_failed: bool,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self {
            include_traces: true,
            include_truncated: false,
            include_failed: false,
        }
    }
}

fn message(role: &str, content: impl Into<String>, loss_flag: bool) -> FinetuneMessage {
    FinetuneMessage {
        role: role.to_string(),
        content: content.into(),
        loss_flag,
    }
}

/// Training serialization of one conversation.
///
/// Student turns become `user` messages. With traces, each tutorbot turn is
/// the sequence of state prompts (`system`) and the canonical state outputs
/// (`assistant`, loss-bearing); the last output carries the visible
/// response. Without traces, the tutorbot turn is just its visible text.
pub fn finetune_example(conversation: &Conversation, include_traces: bool) -> FinetuneExample {
    let mut messages = Vec::new();
    for (i, turn) in conversation.turns.iter().enumerate() {
        match turn.speaker {
            Speaker::Student => messages.push(message("user", turn.text.as_str(), false)),
            Speaker::Tutorbot => {
                let trace = conversation.traces.get(&i).filter(|_| include_traces);
                let Some(trace) = trace else {
                    messages.push(message("assistant", turn.text.as_str(), true));
                    continue;
                };
                let outputs = [
                    (SoliloquyState::Deciding, Some(trace.decision.to_wire())),
                    (SoliloquyState::UsePython, trace.artifact.as_ref().map(|a| a.to_wire())),
                    (
                        if trace.decision.use_python {
                            SoliloquyState::ReceivedPython
                        } else {
                            SoliloquyState::NoPython
                        },
                        Some(trace.tutor_turn.to_wire()),
                    ),
                ];
                for (state, output) in outputs {
                    let Some(output) = output else { continue };
                    if let Some(exchange) = trace.accepted(state) {
                        messages.push(message("system", exchange.prompt.as_str(), false));
                    }
                    messages.push(message("assistant", output, true));
                }
            }
        }
    }
    FinetuneExample { messages }
}

pub fn export_finetune(
    conversations: &[Conversation],
    path: impl AsRef<Path>,
    options: FinetuneOptions,
) -> Result<usize, DatasetError> {
    let keep = |c: &&Conversation| match c.status {
        ConversationStatus::Complete | ConversationStatus::Open => true,
        ConversationStatus::Truncated => options.include_truncated,
        ConversationStatus::Failed => options.include_failed,
    };
    let examples: Vec<FinetuneExample> = conversations
        .iter()
        .filter(keep)
        .map(|c| finetune_example(c, options.include_traces))
        .collect();
    write_jsonl(path.as_ref(), &examples)?;
    Ok(examples.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_450_from_300() {
        let ids: Vec<String> = (0..300).map(|i| format!("q{i:03}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let runs = plan_schedule(&refs, ScheduleSpec::Total(450), 1).unwrap();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for r in &runs {
            *counts.entry(r.question_id.as_str()).or_default() += 1;
        }
        assert_eq!(counts.values().filter(|c| **c == 2).count(), 150);
        assert_eq!(counts.values().filter(|c| **c == 1).count(), 150);
        // the doubles are the first 150 ids
        assert!(ids[..150].iter().all(|id| counts[id.as_str()] == 2));
        let unique: HashSet<_> = runs.iter().map(|r| &r.conversation_id).collect();
        assert_eq!(unique.len(), 450);
    }

    #[test]
    fn schedule_uses_id_order() {
        let runs = plan_schedule(&["b", "a", "c"], ScheduleSpec::Total(4), 0).unwrap();
        let order: Vec<_> = runs.iter().map(|r| r.conversation_id.as_str()).collect();
        assert_eq!(order, vec!["a-r0", "b-r0", "c-r0", "a-r1"]);
        assert!(plan_schedule(&[], ScheduleSpec::Total(1), 0).is_err());
        assert!(plan_schedule(&[], ScheduleSpec::Total(0), 0).unwrap().is_empty());
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, "q1", 0), derive_seed(7, "q1", 0));
        assert_ne!(derive_seed(7, "q1", 0), derive_seed(7, "q1", 1));
        assert_ne!(derive_seed(7, "q1", 0), derive_seed(8, "q1", 0));
        assert_ne!(derive_seed(7, "q1", 0), derive_seed(7, "q2", 0));
    }

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn load_questions_edge_cases() {
        let dir = tempfile::tempdir().unwrap();
        let empty = write(dir.path(), "empty.jsonl", "");
        assert!(load_questions(&empty).unwrap().is_empty());

        let mut lines: Vec<String> = (1..=6)
            .map(|i| format!(r#"{{"id": "q{i}", "question": "Q{i}", "sme_solution": "S{i}", "topic": "kinematics"}}"#))
            .collect();
        lines.push(r#"{"id": "q3", "question": "Q", "sme_solution": "S", "topic": ""}"#.into());
        let dup = write(dir.path(), "dup.jsonl", &lines.join("\n"));
        assert!(matches!(
            load_questions(&dup),
            Err(DatasetError::DuplicateId { line: 7, .. })
        ));

        let bad = write(dir.path(), "bad.jsonl", "{\"id\": \"q1\", \"question\": \"Q\", \"sme_solution\": \"S\"}\nnot json\n");
        assert!(matches!(load_questions(&bad), Err(DatasetError::Parse { line: 2, .. })));
    }
}

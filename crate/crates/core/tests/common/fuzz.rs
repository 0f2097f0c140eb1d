//! Randomized scripted sessions for the soliloquy state machine.

use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use soliloquy_core::backend::{BackendError, ChatBackend, ChatMessage, CompletionParams};
use soliloquy_core::orchestrator::{Clock, EngineConfig, MockConversation, StudentPolicy};
use soliloquy_core::prompts::{serialize_history, Audience, TemplateSet};
use soliloquy_core::protocol::{CodeArtifact, EnrichedSolution, StepState};
use soliloquy_core::sandbox::{CapturedValue, CodeExecutor, ExecutionLimits, ExecutionResult, ExecutionStatus};
use soliloquy_core::{Conversation, ConversationStatus, TutorEngine};

/// Executor that never spawns anything: the outcome is a function of the code.
pub struct FakeExecutor;

#[async_trait]
impl CodeExecutor for FakeExecutor {
    async fn execute(&self, artifact: &CodeArtifact, _limits: &ExecutionLimits) -> ExecutionResult {
        let h = artifact.code.bytes().fold(0u32, |h, b| h.wrapping_mul(31).wrapping_add(b as u32));
        match h % 5 {
            0 => ExecutionResult::failed(ExecutionStatus::RuntimeError, "ZeroDivisionError"),
            1 => ExecutionResult::failed(ExecutionStatus::Timeout, ""),
            _ => ExecutionResult {
                status: ExecutionStatus::Ok,
                values: artifact
                    .result_variables
                    .iter()
                    .map(|v| (v.clone(), CapturedValue::Bool(h % 2 == 0)))
                    .collect(),
                stderr: String::new(),
            },
        }
    }

    async fn check_compiles(&self, _code: &str) -> bool {
        true
    }
}

#[derive(Clone, Copy, Debug)]
enum Prompt {
    Student,
    Deciding,
    UsePython,
    ReceivedPython,
    NoPython,
}

fn classify(first: &str) -> Prompt {
    if first.starts_with("You are a high school student") {
        Prompt::Student
    } else if first.contains("code generation bot") {
        Prompt::UsePython
    } else if first.contains("The description of the Tutorbot's Python code") {
        Prompt::ReceivedPython
    } else if first.contains("Function of \"Use Python\"") {
        Prompt::Deciding
    } else {
        Prompt::NoPython
    }
}

/// Replies drawn at random per request, valid or malformed.
pub struct FuzzBackend {
    rng: Mutex<ChaCha8Rng>,
    malformed: f64,
    finish: f64,
}

impl FuzzBackend {
    pub fn new(seed: u64, malformed: f64, finish: f64) -> Self {
        Self {
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            malformed,
            finish,
        }
    }
}

fn nonce(rng: &mut ChaCha8Rng) -> String {
    format!("{:016x}", rng.random::<u64>())
}

fn tutor_turn(rng: &mut ChaCha8Rng, finish: f64) -> String {
    const PAIRS: [(&str, &str); 12] = [
        ("a", "1"), ("a", "2"), ("b", "3"), ("c", "4"), ("c", "5"), ("d", "6"),
        ("e", "7"), ("f", "8"), ("f", "9"), ("f", "10"), ("f", "11"), ("g", "12"),
    ];
    let (ev, act) = PAIRS[rng.random_range(0..PAIRS.len())];
    let state = if rng.random_bool(finish) {
        "t"
    } else {
        ["p", "q", "r"][rng.random_range(0..3)]
    };
    json!({
        "Thoughts of Tutorbot": format!("private reasoning {}", nonce(rng)),
        "Evaluation of Student Response": ev,
        "Action Based on Evaluation": act,
        "Step Number": rng.random_range(1..4).to_string(),
        "Step State": state,
        "Tutorbot Response": format!("visible response {}", nonce(rng)),
    })
    .to_string()
}

fn malformed(rng: &mut ChaCha8Rng, kind: Prompt) -> String {
    let n = nonce(rng);
    match (kind, rng.random_range(0..3)) {
        (_, 0) => format!("I am not sure what to say {n}"),
        (Prompt::Deciding, 1) => json!({"Use Python": "maybe", "Description": n}).to_string(),
        (Prompt::Deciding, _) => json!({"Use Python": "y"}).to_string(),
        (Prompt::UsePython, 1) => json!({"Python": {
            "Python Code": format!("```python\nx = eval('1+1')  # {n}\n```"),
            "Result Variable": "x"}})
        .to_string(),
        (Prompt::UsePython, _) => json!({"Python": {
            "Python Code": format!("```python\nx = 1  # {n}\n```"),
            "Result Variable": ""}})
        .to_string(),
        (_, 1) => json!({
            "Thoughts of Tutorbot": n,
            "Evaluation of Student Response": "a",
            "Action Based on Evaluation": "3",
            "Step Number": "1",
            "Step State": "q",
            "Tutorbot Response": format!("mismatched pair {}", nonce(rng)),
        })
        .to_string(),
        _ => format!("{{\"Tutorbot Response\": \"truncated {n}\""),
    }
}

#[async_trait]
impl ChatBackend for FuzzBackend {
    async fn complete(&self, messages: &[ChatMessage], _params: &CompletionParams) -> Result<String, BackendError> {
        let kind = classify(&messages[0].content);
        let mut rng = self.rng.lock().unwrap();
        let rng = &mut *rng;
        if !matches!(kind, Prompt::Student) && rng.random_bool(self.malformed) {
            return Ok(malformed(rng, kind));
        }
        Ok(match kind {
            Prompt::Student => {
                if rng.random_bool(0.5) {
                    format!("I got {} m/s for this step ({})", rng.random_range(1..100), nonce(rng))
                } else {
                    format!("Could you give me a hint? ({})", nonce(rng).replace(|c: char| c.is_ascii_digit(), "x"))
                }
            }
            Prompt::Deciding => {
                if rng.random_bool(0.5) {
                    json!({"Use Python": "y", "Description": format!("check the value {}", nonce(rng))}).to_string()
                } else {
                    json!({"Use Python": "n", "Description": ""}).to_string()
                }
            }
            Prompt::UsePython => {
                let var = format!("ok_{}", nonce(rng));
                json!({"Python": {
                    "Python Code": format!("```python\nimport math\n{var} = math.isclose(1.0, 1.0, rel_tol=0.01)\n```"),
                    "Result Variable": var}})
                .to_string()
            }
            Prompt::ReceivedPython | Prompt::NoPython => tutor_turn(rng, self.finish),
        })
    }
}

#[derive(Debug, Default)]
pub struct FuzzReport {
    pub sessions: usize,
    pub steps: usize,
    pub repaired_steps: usize,
    pub failed_sessions: usize,
    pub complete_sessions: usize,
    pub illegal_transitions: Vec<String>,
    pub accounting_violations: Vec<String>,
    pub leaks: Vec<String>,
}

impl FuzzReport {
    pub fn clean(&self) -> bool {
        self.illegal_transitions.is_empty() && self.accounting_violations.is_empty() && self.leaks.is_empty()
    }
}

pub fn check_conversation(conv: &Conversation, report: &mut FuzzReport) {
    let id = &conv.id;
    for trace in conv.traces.values() {
        if let Err(e) = trace.check_invariants() {
            report.illegal_transitions.push(format!("{id}: {e}"));
        }
    }
    if let Err(e) = conv.check_well_formed() {
        report.accounting_violations.push(format!("{id}: {e}"));
    }
    let (traces, tutor, student) = (conv.traces.len(), conv.tutor_turn_count(), conv.student_turn_count());
    if traces != tutor || tutor != student {
        report
            .accounting_violations
            .push(format!("{id}: {traces} traces, {tutor} tutor turns, {student} student turns"));
    }
    let finished_at: Vec<usize> = conv
        .traces_in_order()
        .enumerate()
        .filter(|(_, t)| t.tutor_turn.step_state == StepState::ProblemFinished)
        .map(|(i, _)| i)
        .collect();
    let last = tutor.saturating_sub(1);
    if finished_at.iter().any(|&i| i != last) {
        report.accounting_violations.push(format!("{id}: turns accepted after t"));
    }
    if (conv.status == ConversationStatus::Complete) != (finished_at == [last] && tutor > 0) {
        report
            .accounting_violations
            .push(format!("{id}: status {:?} disagrees with step states", conv.status));
    }

    let visible = serialize_history(&conv.turns, Audience::Student);
    for trace in conv.traces.values() {
        for fragment in trace.hidden_fragments() {
            if fragment.len() >= 8 && visible.contains(&fragment) {
                report.leaks.push(format!("{id}: {fragment:?}"));
            }
        }
    }
}

/// Runs `sessions` randomized conversations derived from `seed`.
pub async fn run(sessions: usize, seed: u64) -> FuzzReport {
    let templates = Arc::new(TemplateSet::builtin());
    let executor: Arc<dyn CodeExecutor> = Arc::new(FakeExecutor);
    let solution = EnrichedSolution {
        detailed: "Step 1) Find the time. Step 2) Find the speed.".into(),
        outline: "Step 1) time Step 2) speed".into(),
    };
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FuzzReport::default();
    for i in 0..sessions {
        let config = EngineConfig {
            max_repairs: master.random_range(0..=3),
            max_visible_turns: master.random_range(1..=8),
            ..EngineConfig::default()
        };
        let engine = TutorEngine::new(templates.clone(), executor.clone(), config);
        let backend = FuzzBackend::new(master.random(), master.random_range(0.0..0.5), 0.15);
        let id = format!("fuzz-{i}");
        let conv = engine
            .run_mock_conversation(
                MockConversation {
                    conversation_id: &id,
                    question_id: "fuzz",
                    question: "A ball falls 20 m. How long does it fall?",
                    solution: &solution,
                    policy: StudentPolicy::new(master.random_range(0.0..=1.0), master.random()).unwrap(),
                },
                &backend,
                &Clock::None,
            )
            .await;
        report.sessions += 1;
        report.steps += conv.traces.len();
        report.repaired_steps += conv.traces.values().filter(|t| t.repair_attempts > 0).count();
        match conv.status {
            ConversationStatus::Failed => report.failed_sessions += 1,
            ConversationStatus::Complete => report.complete_sessions += 1,
            _ => {}
        }
        check_conversation(&conv, &mut report);
    }
    report
}
